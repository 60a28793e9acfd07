"""Gaussian randomized smoothing of the image tower (a PAG baseline).

Noise is added in raw [0, 1] pixel space and samples are not clamped, so the
Monte-Carlo estimate targets the unclamped expectation E[f(x + n)].
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .encoders import encode_image, image_input_gradient
from .errors import ContractError


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float = 0.25
    n_samples: int = 64
    seed: int = 0
    antithetic: bool = True
    chunk_size: int = 64

    def __post_init__(self):
        if self.sigma < 0:
            raise ContractError(f"sigma must be >= 0, got {self.sigma}")
        if self.n_samples < 1:
            raise ContractError(f"n_samples must be >= 1, got {self.n_samples}")


def noise_draws(shape, n: int, cfg: SmoothingConfig, dtype=torch.float32) -> torch.Tensor:
    """The ``n`` noise tensors (n, *shape) used for a given seed, in draw order."""
    g = torch.Generator().manual_seed(cfg.seed)
    return torch.randn((n, *shape), generator=g, dtype=dtype) * cfg.sigma


def smoothed_embed(model, images: torch.Tensor, cfg: SmoothingConfig) -> torch.Tensor:
    """Normalized Monte-Carlo mean of normalized image embeddings under noise."""
    if cfg.sigma == 0:
        return encode_image(model, images)
    images = images.to(model.dtype)
    noise = noise_draws(images.shape, cfg.n_samples, cfg, dtype=model.dtype)
    total = torch.zeros(images.shape[0], model.config.embed_dim, dtype=model.dtype)
    with torch.no_grad():
        for start in range(0, cfg.n_samples, max(1, cfg.chunk_size // images.shape[0])):
            chunk = noise[start : start + max(1, cfg.chunk_size // images.shape[0])]
            k = chunk.shape[0]
            batch = (images.unsqueeze(0) + chunk).reshape(-1, *images.shape[1:])
            total += encode_image(model, batch).view(k, images.shape[0], -1).sum(0)
    return F.normalize(total / cfg.n_samples, dim=-1)


def _pairs(cfg: SmoothingConfig, shape, dtype):
    """Noise list for the gradient estimator: antithetic (+n, -n) pairs, or iid draws."""
    if not cfg.antithetic:
        return list(noise_draws(shape, cfg.n_samples, cfg, dtype))
    half = (cfg.n_samples + 1) // 2
    base = noise_draws(shape, half, cfg, dtype)
    out = []
    for n in base:
        out.extend([n, -n])
    return out[: cfg.n_samples]


def smoothed_input_gradient(model, images, tokens, cfg: SmoothingConfig, objective: str = "maximize_cosine"):
    """Average of cosine-similarity input gradients over noisy copies of ``images``.

    With ``antithetic=True`` draws come in ``(+n, -n)`` pairs; an odd
    ``n_samples`` keeps the ``+n`` half of the last pair.
    """
    if cfg.sigma == 0:
        return image_input_gradient(model, images, tokens, objective)
    images = images.to(model.dtype)
    noises = _pairs(cfg, images.shape, model.dtype)
    per = max(1, cfg.chunk_size // images.shape[0])
    total = torch.zeros_like(images)
    for start in range(0, len(noises), per):
        chunk = torch.stack(noises[start : start + per])
        k = chunk.shape[0]
        batch = (images.unsqueeze(0) + chunk).reshape(-1, *images.shape[1:])
        rep_tokens = tokens.repeat(k, 1)
        # mean over the k*N batch scales each per-image gradient by 1/(k*N)
        g = image_input_gradient(model, batch, rep_tokens, objective) * (k * images.shape[0])
        total += g.view(k, *images.shape).sum(0)
    return total / (len(noises) * images.shape[0])
