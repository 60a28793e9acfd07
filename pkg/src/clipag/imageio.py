"""PNG/array conversions for (N, 3, H, W) tensors in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """(3, H, W) or (1, 3, H, W) tensor -> (H, W, 3) uint8, round-half-even."""
    if image.dim() == 4:
        image = image[0]
    arr = image.detach().cpu().clamp(0, 1).permute(1, 2, 0).to(torch.float64).numpy()
    return np.round(arr * 255).astype(np.uint8)


def save_png(image: torch.Tensor, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")
    return path


def load_png(path, resolution=None) -> torch.Tensor:
    """Load an image file as a (1, 3, H, W) float32 tensor in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    x = torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0).contiguous()
    if resolution is not None and tuple(x.shape[-2:]) != tuple(resolution):
        x = resize(x, resolution)
    return x


def resize(images: torch.Tensor, resolution) -> torch.Tensor:
    """Area filter when shrinking, bilinear when enlarging (per the larger factor)."""
    h, w = images.shape[-2:]
    th, tw = tuple(resolution)
    mode = "area" if th <= h and tw <= w else "bilinear"
    kwargs = {} if mode == "area" else {"align_corners": False}
    return torch.nn.functional.interpolate(images, size=(th, tw), mode=mode, **kwargs).clamp(0, 1)
