"""Per-class Gaussian model over low-resolution images, used to seed synthesis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..encoders import cosine_similarity, encode_image, encode_text
from ..errors import ContractError, DataError

COVARIANCE_MODES = ("diag", "full")


@dataclass
class GmmInitializer:
    """One Gaussian per class over flattened (3, h, w) low-resolution images.

    ``class_covariances`` is (K, d) for ``diag`` and (K, d, d) for ``full``.
    """

    class_means: torch.Tensor
    class_covariances: torch.Tensor
    low_resolution: tuple
    covariance_mode: str = "diag"
    class_ids: tuple = ()

    def __post_init__(self):
        self.low_resolution = tuple(self.low_resolution)
        if not self.class_ids:
            self.class_ids = tuple(range(self.class_means.shape[0]))
        if self.num_classes < 1:
            raise ContractError("a GMM initializer needs at least one class")
        self._factors = None

    @property
    def num_classes(self) -> int:
        return int(self.class_means.shape[0])

    @property
    def dim(self) -> int:
        return int(self.class_means.shape[1])

    def _sampling_factors(self) -> torch.Tensor:
        # full mode: symmetric square root through eigh, robust to singular covariances
        if self._factors is None:
            evals, evecs = torch.linalg.eigh(self.class_covariances)
            self._factors = evecs * evals.clamp_min(0).sqrt().unsqueeze(-2)
        return self._factors

    def sample(self, m: int, seed: int) -> torch.Tensor:
        """Draw ``m`` images per class, class-major, as (K*m, 3, h, w) float64 (unclamped)."""
        g = torch.Generator().manual_seed(seed)
        z = torch.randn((self.num_classes, m, self.dim), generator=g, dtype=torch.float64)
        if self.covariance_mode == "diag":
            x = self.class_means[:, None] + z * self.class_covariances.clamp_min(0).sqrt()[:, None]
        else:
            x = self.class_means[:, None] + z @ self._sampling_factors().transpose(-1, -2)
        h, w = self.low_resolution
        return x.reshape(self.num_classes * m, 3, h, w)

    def save(self, path) -> None:
        np.savez(
            path,
            class_means=self.class_means.numpy(),
            class_covariances=self.class_covariances.numpy(),
            low_resolution=np.asarray(self.low_resolution),
            covariance_mode=np.asarray(self.covariance_mode),
            class_ids=np.asarray(self.class_ids),
        )

    @classmethod
    def load(cls, path) -> "GmmInitializer":
        with np.load(path) as z:
            return cls(
                class_means=torch.from_numpy(z["class_means"]),
                class_covariances=torch.from_numpy(z["class_covariances"]),
                low_resolution=tuple(int(v) for v in z["low_resolution"]),
                covariance_mode=str(z["covariance_mode"]),
                class_ids=tuple(int(v) for v in z["class_ids"]),
            )


def downsample(images: torch.Tensor, size: int | tuple) -> torch.Tensor:
    """Area (box-filter) resize, exact block means for integer factors."""
    size = (size, size) if isinstance(size, int) else tuple(size)
    return F.interpolate(images, size=size, mode="area")


def fit_gmm(low_res_images: torch.Tensor, labels, covariance_mode: str = "diag", shrinkage: float = 0.0):
    """Fit per-class mean and covariance (unbiased, ddof=1).

    ``full`` mode optionally shrinks each covariance towards
    ``trace(S)/d * I`` by ``shrinkage`` in [0, 1].
    """
    if covariance_mode not in COVARIANCE_MODES:
        raise ContractError(f"covariance_mode must be one of {COVARIANCE_MODES}")
    if not 0.0 <= shrinkage <= 1.0:
        raise ContractError(f"shrinkage must lie in [0, 1], got {shrinkage}")
    x = low_res_images.detach().to(torch.float64)
    n, c, h, w = x.shape
    x = x.reshape(n, c * h * w)
    labels = torch.as_tensor(labels)
    means, covs, ids = [], [], []
    for cls_id in torch.unique(labels).tolist():
        xs = x[labels == cls_id]
        if xs.shape[0] < 2:
            raise DataError(f"class {cls_id} has {xs.shape[0]} sample(s); at least 2 are required")
        # shifted mean: exact for identical samples, so their covariance is exactly zero
        mu = xs[0] + (xs - xs[0]).mean(0)
        centered = xs - mu
        if covariance_mode == "diag":
            cov = centered.pow(2).sum(0) / (xs.shape[0] - 1)
        else:
            cov = centered.T @ centered / (xs.shape[0] - 1)
            if shrinkage:
                target = torch.eye(cov.shape[0], dtype=cov.dtype) * cov.diagonal().mean()
                cov = (1 - shrinkage) * cov + shrinkage * target
        means.append(mu)
        covs.append(cov)
        ids.append(int(cls_id))
    return GmmInitializer(
        class_means=torch.stack(means),
        class_covariances=torch.stack(covs),
        low_resolution=(h, w),
        covariance_mode=covariance_mode,
        class_ids=tuple(ids),
    )


def sample_candidates(gmm: GmmInitializer, m: int, seed: int, resolution, dtype=torch.float32) -> torch.Tensor:
    """Sample, clamp to [0, 1] and bilinearly upsample ``m`` candidates per class."""
    if m < 1:
        raise ContractError(f"M must be >= 1, got {m}")
    low = gmm.sample(m, seed).clamp(0, 1)
    up = F.interpolate(low, size=tuple(resolution), mode="bilinear", align_corners=False)
    return up.clamp(0, 1).to(dtype)


def score_candidates(model, candidates: torch.Tensor, tokens: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    with torch.no_grad():
        txt = encode_text(model, tokens[:1])
        sims = []
        for start in range(0, candidates.shape[0], batch_size):
            img = encode_image(model, candidates[start : start + batch_size])
            sims.append(cosine_similarity(img, txt.expand_as(img)))
    return torch.cat(sims)


def sample_and_select(gmm: GmmInitializer, model, tokens, m: int, seed: int, output_resolution=None):
    """Return the (1, 3, H, W) candidate best aligned with ``tokens[0]``."""
    if tokens.shape[0] != 1:
        raise ContractError(f"sample_and_select takes a single prompt, got {tokens.shape[0]}")
    resolution = tuple(output_resolution or model.resolution)
    candidates = sample_candidates(gmm, m, seed, resolution, dtype=model.dtype)
    sims = score_candidates(model, candidates, tokens)
    return candidates[int(torch.argmax(sims))].unsqueeze(0)
