"""Differentiable multiview augmentation (DiffAugment ops plus random resized crop).

Randomness is drawn up front into a :class:`ViewParams` record so a view can be
replayed exactly, or forced in tests. Order per view: crop, color,
translation, cutout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ConfigError

AUGMENTATIONS = ("color", "translation", "cutout", "random_crop")


@dataclass
class ViewParams:
    crop: tuple | None = None  # (top, left, height, width)
    brightness: float | None = None
    saturation: float | None = None
    contrast: float | None = None
    translation: tuple | None = None  # (dy, dx)
    cutout: tuple | None = None  # (center_y, center_x, size_h, size_w)


def validate_augmentations(cfg, resolution) -> None:
    unknown = set(cfg.augmentation_set) - set(AUGMENTATIONS)
    if unknown:
        raise ConfigError(f"unknown augmentations {sorted(unknown)}; valid: {AUGMENTATIONS}")
    lo, hi = cfg.crop_scale
    if not 0 < lo <= hi:
        raise ConfigError(f"crop_scale must satisfy 0 < lo <= hi, got {cfg.crop_scale}")
    if hi > 1:
        raise ConfigError(f"crop size exceeds image: crop_scale upper bound {hi} > 1 of side {resolution}")


def sample_view_params(cfg, resolution, rng: np.random.Generator) -> ViewParams:
    h, w = resolution
    p = ViewParams()
    augs = cfg.augmentation_set
    if "random_crop" in augs:
        side = rng.uniform(*cfg.crop_scale)
        ch, cw = max(1, int(round(side * h))), max(1, int(round(side * w)))
        p.crop = (int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), ch, cw)
    if "color" in augs:
        p.brightness = float(rng.uniform() - 0.5)
        p.saturation = float(rng.uniform() * 2)
        p.contrast = float(rng.uniform() + 0.5)
    if "translation" in augs:
        sy, sx = int(h * cfg.translation_ratio + 0.5), int(w * cfg.translation_ratio + 0.5)
        p.translation = (int(rng.integers(-sy, sy + 1)), int(rng.integers(-sx, sx + 1)))
    if "cutout" in augs:
        ch, cw = int(h * cfg.cutout_ratio + 0.5), int(w * cfg.cutout_ratio + 0.5)
        p.cutout = (
            int(rng.integers(0, h + (1 - ch % 2))),
            int(rng.integers(0, w + (1 - cw % 2))),
            ch,
            cw,
        )
    return p


def translate(x: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    """Shift content by (dy, dx) pixels with zero fill: out[y, x] = in[y - dy, x - dx]."""
    h, w = x.shape[-2:]
    padded = F.pad(x, (abs(dx), abs(dx), abs(dy), abs(dy)))
    top, left = abs(dy) - dy, abs(dx) - dx
    return padded[..., top : top + h, left : left + w]


def apply_view(image: torch.Tensor, p: ViewParams) -> torch.Tensor:
    x = image
    h, w = x.shape[-2:]
    if p.crop is not None:
        top, left, ch, cw = p.crop
        x = x[..., top : top + ch, left : left + cw]
        if (ch, cw) != (h, w):
            x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    if p.brightness is not None:
        x = x + p.brightness
    if p.saturation is not None:
        m = x.mean(dim=1, keepdim=True)
        x = (x - m) * p.saturation + m
    if p.contrast is not None:
        m = x.mean(dim=(1, 2, 3), keepdim=True)
        x = (x - m) * p.contrast + m
    if p.translation is not None:
        x = translate(x, *p.translation)
    if p.cutout is not None:
        cy, cx, ch, cw = p.cutout
        yy = torch.arange(h).view(-1, 1)
        xx = torch.arange(w).view(1, -1)
        y0, x0 = cy - ch // 2, cx - cw // 2
        inside = (yy >= y0) & (yy < y0 + ch) & (xx >= x0) & (xx < x0 + cw)
        x = x * (~inside).to(x.dtype)
    return x


def view_rng(step_seed: int, view_index: int) -> np.random.Generator:
    return np.random.default_rng([int(step_seed), int(view_index)])


def augment_views(image: torch.Tensor, cfg, step_seed: int) -> torch.Tensor:
    """Stack ``cfg.n_views`` independently augmented views of a (1, 3, H, W) image.

    Views are not re-clipped to [0, 1]; they only feed the encoder.
    """
    if image.shape[0] != 1:
        raise ConfigError(f"augment_views expects a single image, got batch of {image.shape[0]}")
    if cfg.n_views < 1:
        raise ConfigError(f"n_views must be >= 1, got {cfg.n_views}")
    resolution = tuple(image.shape[-2:])
    validate_augmentations(cfg, resolution)
    if not cfg.augmentation_set:
        return image.expand(cfg.n_views, -1, -1, -1)
    views = [
        apply_view(image, sample_view_params(cfg, resolution, view_rng(step_seed, v)))
        for v in range(cfg.n_views)
    ]
    return torch.cat(views)
