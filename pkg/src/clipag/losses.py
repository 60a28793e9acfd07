"""Image-text objectives shared by the attack engine and the training loop."""

import torch
import torch.nn.functional as F

from .encoders import cosine_similarity
from .errors import ShapeError


def contrastive_loss(sim: torch.Tensor) -> torch.Tensor:
    """Symmetric InfoNCE over a square logit matrix with diagonal targets."""
    if sim.dim() != 2 or sim.shape[0] != sim.shape[1]:
        raise ShapeError(f"contrastive loss needs a square matrix, got {tuple(sim.shape)}")
    target = torch.arange(sim.shape[0], device=sim.device)
    return 0.5 * (F.cross_entropy(sim, target) + F.cross_entropy(sim.T, target))


def pairwise_cosine_attack_loss(img: torch.Tensor, txt: torch.Tensor) -> torch.Tensor:
    """Mean over matching pairs of ``1 - cos(img_i, txt_i)``; in [0, 2]."""
    return (1.0 - cosine_similarity(img, txt)).mean()


def negation_attack_loss(img: torch.Tensor, txt: torch.Tensor, neg_txt: torch.Tensor) -> torch.Tensor:
    """Cosine loss towards ``txt`` minus cosine loss towards its negation."""
    return ((1.0 - cosine_similarity(img, txt)) - (1.0 - cosine_similarity(img, neg_txt))).mean()
