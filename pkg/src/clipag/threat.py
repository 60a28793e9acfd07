"""Threat models, norm-ball projections and PGD on image-text similarity."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch

from .encoders import cosine_similarity, encode_image, encode_text
from .errors import ContractError
from .losses import negation_attack_loss, pairwise_cosine_attack_loss
from .tokenizer import tokenize

NORMS = ("L2", "Linf")
ATTACK_LOSSES = ("minimize_pair_cosine", "negation_objective")


@dataclass(frozen=True)
class ThreatModel:
    """Perturbation set plus PGD schedule; epsilon is in [0, 1] pixel units.

    ``step_size=None`` resolves to ``2 * epsilon / steps``. ``epsilon=0`` is
    accepted and makes every attack the identity.
    """

    norm: str = "L2"
    epsilon: float = 1.5
    steps: int = 5
    step_size: float | None = None
    random_start: bool = False

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ContractError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.epsilon < 0:
            raise ContractError(f"epsilon must be >= 0, got {self.epsilon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ContractError(f"steps must be an integer >= 1, got {self.steps}")
        if self.step_size is None:
            object.__setattr__(self, "step_size", 2.0 * self.epsilon / self.steps)
        if self.step_size < 0:
            raise ContractError(f"step_size must be >= 0, got {self.step_size}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ThreatModel":
        return cls(**d)


@dataclass
class AttackResult:
    adversarial: torch.Tensor
    delta: torch.Tensor
    loss_trace: list = field(default_factory=list)
    final_similarity: torch.Tensor | None = None


def _flat_norm(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(1).norm(dim=1).view(-1, *([1] * (x.dim() - 1)))


def project(delta: torch.Tensor, tm: ThreatModel) -> torch.Tensor:
    """Project each sample of ``delta`` onto the ``tm`` norm ball.

    L2 rescaling lands a hair inside the sphere (a few ulps), which keeps the
    map exactly idempotent despite rounding in the norm computation.
    """
    if tm.norm == "Linf":
        return delta.clamp(-tm.epsilon, tm.epsilon)
    norms = _flat_norm(delta)
    margin = 8 * torch.finfo(delta.dtype).eps
    factor = torch.where(
        norms > tm.epsilon,
        tm.epsilon * (1 - margin) / norms.clamp_min(torch.finfo(delta.dtype).tiny),
        torch.ones_like(norms),
    )
    return torch.where(norms > tm.epsilon, delta * factor, delta)


def _ascent_direction(grad: torch.Tensor, norm: str) -> torch.Tensor:
    if norm == "Linf":
        return grad.sign()
    return grad / _flat_norm(grad).clamp_min(1e-30)


def _random_start(x: torch.Tensor, tm: ThreatModel, generator) -> torch.Tensor:
    if tm.norm == "Linf":
        d = (torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1) * tm.epsilon
    else:
        d = torch.randn(x.shape, generator=generator, dtype=x.dtype)
        r = torch.rand((x.shape[0],) + (1,) * (x.dim() - 1), generator=generator, dtype=x.dtype)
        d = d / _flat_norm(d) * r * tm.epsilon
    return project(d, tm)


def pgd_attack(
    model,
    images: torch.Tensor,
    tokens: torch.Tensor | None,
    tm: ThreatModel,
    loss: str = "minimize_pair_cosine",
    negated_tokens: torch.Tensor | None = None,
    text_embeddings: torch.Tensor | None = None,
    negated_embeddings: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> AttackResult:
    """Projected gradient ascent on the attack loss over ``delta``.

    Each iteration takes an ascent step (sign step for Linf, unit-L2 gradient
    step for L2), projects onto the ball, then clips so ``x + delta`` stays in
    [0, 1]. Precomputed (normalized) text embeddings may be passed instead of
    tokens. The model runs in eval mode and its parameters are not modified.
    """
    if loss not in ATTACK_LOSSES:
        raise ContractError(f"unknown attack loss {loss!r}; expected one of {ATTACK_LOSSES}")
    if loss == "negation_objective" and negated_tokens is None and negated_embeddings is None:
        raise ContractError("negation_objective requires negated tokens (see negation_tokens)")

    was_training = model.training
    model.eval()
    try:
        x = images.detach().to(model.dtype)
        with torch.no_grad():
            txt = text_embeddings if text_embeddings is not None else encode_text(model, tokens)
            neg = None
            if loss == "negation_objective":
                neg = negated_embeddings if negated_embeddings is not None else encode_text(model, negated_tokens)
        if txt.shape[0] != x.shape[0]:
            raise ContractError(f"attack needs paired inputs: {x.shape[0]} images vs {txt.shape[0]} texts")

        delta = _random_start(x, tm, generator) if tm.random_start else torch.zeros_like(x)
        delta = (x + delta).clamp(0, 1) - x
        trace = []
        for _ in range(tm.steps):
            with torch.enable_grad():
                delta.requires_grad_(True)
                img = encode_image(model, x + delta)
                if neg is None:
                    obj = pairwise_cosine_attack_loss(img, txt)
                else:
                    obj = negation_attack_loss(img, txt, neg)
                (grad,) = torch.autograd.grad(obj, delta)
                obj = obj.detach()
            trace.append(obj.item())
            with torch.no_grad():
                delta = project(delta.detach() + tm.step_size * _ascent_direction(grad, tm.norm), tm)
                delta = (x + delta).clamp(0, 1) - x

        adversarial = (x + delta).clamp(0, 1)
        with torch.no_grad():
            final = cosine_similarity(encode_image(model, adversarial), txt)
    finally:
        model.train(was_training)
    return AttackResult(adversarial=adversarial, delta=delta, loss_trace=trace, final_similarity=final)


_ARTICLES = ("a", "an", "the")


def negate_phrase(text: str) -> tuple[str, str]:
    """``"a cat" -> ("a cat", "not a cat")``; a missing article is added."""
    phrase = " ".join(text.lower().split())
    if not phrase:
        raise ContractError("negation needs a non-empty object phrase")
    if phrase.split()[0] in ("not", "no"):
        raise ContractError(f"phrase {text!r} is already negated")
    if phrase.split()[0] not in _ARTICLES:
        phrase = ("an " if phrase[0] in "aeiou" else "a ") + phrase
    return phrase, "not " + phrase


def negation_tokens(text: str, context_length: int = 16):
    phrase, negated = negate_phrase(text)
    return tokenize([phrase], context_length), tokenize([negated], context_length)
