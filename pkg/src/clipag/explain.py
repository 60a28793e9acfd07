"""Text-conditioned GradCAM for the image tower and its stability under attack.

For patch transformers the spatial grid is the patch-token grid (class token
dropped) reshaped to ``(H/P, W/P)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .encoders import cosine_similarity, encode_image, encode_text
from .errors import ContractError
from .threat import ThreatModel, negation_tokens, pgd_attack

# negation-attack defaults for explanation probing
EXPLAIN_THREAT = ThreatModel(norm="Linf", epsilon=8 / 255, steps=20, step_size=1 / 255)


@dataclass
class Heatmap:
    values: np.ndarray  # (H, W)
    source_layer: str
    all_zero: bool = False

    def save(self, path, image: torch.Tensor | None = None, alpha: float = 0.5) -> list[Path]:
        """Write the raw array (``.npy``) and a PNG (alpha-blended over ``image`` if given)."""
        from matplotlib import colormaps
        from PIL import Image

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        raw = path.with_suffix(".npy")
        np.save(raw, self.values)
        rgb = colormaps["jet"](self.values)[..., :3]
        if image is not None:
            base = image.detach().reshape(3, *self.values.shape).permute(1, 2, 0).cpu().numpy()
            rgb = (1 - alpha) * base + alpha * rgb
        Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)).save(path.with_suffix(".png"))
        return [raw, path.with_suffix(".png")]


def normalize_heatmap(values, layer: str = "") -> Heatmap:
    """ReLU then max-normalize; an all-zero map stays zero and is flagged."""
    v = np.maximum(np.asarray(values, dtype=np.float64), 0.0)
    peak = v.max() if v.size else 0.0
    if peak <= 0:
        return Heatmap(np.zeros_like(v), layer, all_zero=True)
    return Heatmap(v / peak, layer)


def gradcam_from_activations(features, gradients) -> np.ndarray:
    """Unnormalized, rectified CAM from (C, h, w) features and gradients."""
    a = np.asarray(features, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    if a.shape != g.shape or a.ndim != 3:
        raise ContractError(f"features and gradients must share a (C, h, w) shape, got {a.shape} and {g.shape}")
    weights = g.mean(axis=(1, 2))
    return np.maximum(np.einsum("c,chw->hw", weights, a), 0.0)


def spatial_layers(model) -> dict:
    return model.visual.spatial_layers()


def _as_grid(out: torch.Tensor, visual) -> torch.Tensor:
    if out.dim() == 4:
        return out
    # transformer tokens (N, 1 + g*g, C) -> (N, C, g, g)
    g = visual.grid
    return out[:, 1:].transpose(1, 2).reshape(out.shape[0], -1, g, g)


def default_layer(model) -> str:
    layers = list(spatial_layers(model))
    if not layers:
        raise ContractError(f"{model.arch_tag} has no spatial feature layers")
    return layers[-1]


def _gradcam_tensor(model, image, txt, layer_id):
    layers = spatial_layers(model)
    if layer_id not in layers:
        raise ContractError(f"layer {layer_id!r} is not spatial; valid layers: {sorted(layers)}")
    store = {}

    def hook(_m, _i, out):
        store["act"] = out

    handle = layers[layer_id].register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            x = image.detach().to(model.dtype)
            sim = cosine_similarity(encode_image(model, x), txt).sum()
            act = store["act"]
            (grad,) = torch.autograd.grad(sim, act)
    finally:
        handle.remove()
        model.train(was_training)
    act, grad = _as_grid(act.detach(), model.visual), _as_grid(grad, model.visual)
    cam = F.relu((grad.mean(dim=(2, 3), keepdim=True) * act).sum(dim=1, keepdim=True))
    return F.interpolate(cam, size=image.shape[-2:], mode="bilinear", align_corners=False).clamp_min(0)


def gradcam(model, image: torch.Tensor, tokens: torch.Tensor, layer_id: str | None = None) -> Heatmap:
    """GradCAM of ``cos(image, text)`` for a single (1, 3, H, W) image.

    Args:
        model: dual encoder.
        image: (1, 3, H, W) pixels in [0, 1].
        tokens: (1, L) caption tokens.
        layer_id: spatial layer name; defaults to the last spatial layer.
    """
    layer_id = layer_id or default_layer(model)
    with torch.no_grad():
        txt = encode_text(model, tokens)
    cam = _gradcam_tensor(model, image, txt, layer_id)
    return normalize_heatmap(cam[0, 0].cpu().numpy(), layer_id)


def heatmap_shift(a: Heatmap, b: Heatmap) -> float:
    """1 - Pearson correlation; 0 for identical maps, 1 if either map is constant."""
    x, y = a.values.ravel(), b.values.ravel()
    if np.array_equal(x, y):
        return 0.0
    xc, yc = x - x.mean(), y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0:
        return 1.0
    return float(np.clip(1.0 - (xc * yc).sum() / denom, 0.0, 2.0))


def explanation_under_attack(model, image, text: str, tm: ThreatModel = EXPLAIN_THREAT, layer_id=None):
    """Heatmaps before and after a negation attack on ``text``.

    Returns:
        (clean heatmap, adversarial heatmap, shift)
    """
    ctx = model.config.context_length
    pos, neg = negation_tokens(text, ctx)
    clean = gradcam(model, image, pos, layer_id)
    res = pgd_attack(model, image, pos, tm, loss="negation_objective", negated_tokens=neg)
    adv = gradcam(model, res.adversarial, pos, layer_id)
    return clean, adv, heatmap_shift(clean, adv)
