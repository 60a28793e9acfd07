"""Procedural desk-scale image-caption corpus (colored shapes on plain backgrounds).

Stands in for web caption data so that the whole pipeline can be exercised
offline. Every image has a caption of the form
``"a {color} {shape} on a {background} background"`` and an integer class
label (color x shape) usable for GMM fitting.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "purple": (0.6, 0.15, 0.8),
    "orange": (1.0, 0.55, 0.05),
    "cyan": (0.1, 0.85, 0.9),
    "white": (0.95, 0.95, 0.95),
}
SHAPES = ("circle", "square", "triangle", "cross", "ring")
BACKGROUNDS = {
    "black": (0.05, 0.05, 0.05),
    "gray": (0.5, 0.5, 0.5),
    "white": (0.97, 0.97, 0.97),
}
PROMPT_PREFIXES = ("oil painting of", "a pencil drawing of", "a graffiti of", "a childish cartoon of")


def caption_for(color: str, shape: str, background: str) -> str:
    return f"a {color} {shape} on a {background} background"


def class_label(color: str, shape: str) -> int:
    return list(COLORS).index(color) * len(SHAPES) + SHAPES.index(shape)


def num_classes() -> int:
    return len(COLORS) * len(SHAPES)


def _mask(shape: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx**2 + dy**2 <= r**2
    if shape == "ring":
        d2 = dx**2 + dy**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if shape == "square":
        return (np.abs(dx) <= 0.85 * r) & (np.abs(dy) <= 0.85 * r)
    if shape == "cross":
        w = 0.35 * r
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    if shape == "triangle":
        # upward triangle: apex at top, base at bottom
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    raise ValueError(f"unknown shape {shape!r}")


def render(color: str, shape: str, background: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Render one (size, size, 3) float image in [0, 1]."""
    bg = np.asarray(BACKGROUNDS[background]) + rng.normal(0, 0.03, 3)
    fg = np.asarray(COLORS[color]) + rng.normal(0, 0.04, 3)
    r = size * rng.uniform(0.22, 0.34)
    cx = rng.uniform(r, size - r)
    cy = rng.uniform(r, size - r)
    img = np.broadcast_to(bg, (size, size, 3)).copy()
    img[_mask(shape, size, cx, cy, r)] = fg
    img += rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


def _draw_spec(rng: np.random.Generator):
    color = list(COLORS)[rng.integers(len(COLORS))]
    shape = SHAPES[rng.integers(len(SHAPES))]
    backgrounds = [b for b in BACKGROUNDS if b != color]
    background = backgrounds[rng.integers(len(backgrounds))]
    return color, shape, background


def sample_pairs(n: int, resolution: int = 32, seed: int = 0):
    """In-memory corpus: (images (n, 3, H, W) float32, captions, labels)."""
    rng = np.random.default_rng(seed)
    imgs, caps, labels = [], [], []
    for _ in range(n):
        color, shape, background = _draw_spec(rng)
        imgs.append(render(color, shape, background, resolution, rng))
        caps.append(caption_for(color, shape, background))
        labels.append(class_label(color, shape))
    images = torch.from_numpy(np.stack(imgs)).permute(0, 3, 1, 2).float().contiguous()
    return images, caps, torch.tensor(labels, dtype=torch.long)


def write_corpus(out_dir, n: int, resolution: int = 32, seed: int = 0, source: str = "toy") -> Path:
    """Write PNGs plus a JSONL manifest; returns the manifest path."""
    from PIL import Image

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    manifest = out_dir / "manifest.jsonl"
    with manifest.open("w") as fh:
        for i in range(n):
            color, shape, background = _draw_spec(rng)
            arr = render(color, shape, background, resolution, rng)
            rel = f"images/{source}_{i:06d}.png"
            Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(out_dir / rel)
            record = {
                "image": rel,
                "caption": caption_for(color, shape, background),
                "source": source,
                "label": class_label(color, shape),
            }
            fh.write(json.dumps(record) + "\n")
    return manifest
