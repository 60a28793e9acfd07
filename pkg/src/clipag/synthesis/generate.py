"""Generator-free text-to-image synthesis by pixel-space descent."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..encoders import cosine_similarity, encode_image, encode_text
from ..errors import ConfigError, NonFiniteError
from ..imageio import save_png
from ..manifest import RunManifest
from ..tokenizer import tokenize
from .augment import AUGMENTATIONS, augment_views, validate_augmentations
from .gmm import GmmInitializer, sample_and_select


@dataclass
class SynthesisConfig:
    steps_K: int = 1000
    candidates_per_class_M: int = 8
    n_views: int = 16
    step_size: float = 0.5
    augmentation_set: tuple = AUGMENTATIONS
    prefix: str | None = None
    seed: int = 0
    output_resolution: tuple | None = None
    snapshot_every: int = 100
    crop_scale: tuple = (0.6, 1.0)
    translation_ratio: float = 0.125
    cutout_ratio: float = 0.5

    def __post_init__(self):
        self.augmentation_set = tuple(self.augmentation_set)
        self.crop_scale = tuple(self.crop_scale)
        if self.output_resolution is not None:
            self.output_resolution = tuple(self.output_resolution)
        if self.steps_K < 1 or self.n_views < 1 or self.candidates_per_class_M < 1:
            raise ConfigError("steps_K, n_views and candidates_per_class_M must all be >= 1")
        if self.step_size < 0:
            raise ConfigError(f"step_size must be >= 0, got {self.step_size}")
        validate_augmentations(self, self.output_resolution)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthesisTrajectory:
    initialization: torch.Tensor
    snapshots: list = field(default_factory=list)
    final: torch.Tensor | None = None
    loss_trace: list = field(default_factory=list)
    manifest: RunManifest | None = None


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(step)]).generate_state(1)[0])


def synthesis_loss(image, text_embedding, model, cfg: SynthesisConfig, seed: int) -> torch.Tensor:
    """Mean over augmented views of ``1 - cos(view, text)``."""
    views = augment_views(image, cfg, seed)
    emb = encode_image(model, views)
    return (1.0 - cosine_similarity(emb, text_embedding.expand_as(emb))).mean()


def synthesis_step(image, text_embedding, model, cfg: SynthesisConfig, seed: int, step_index: int = 0):
    """One normalized-gradient descent step on the pixels; returns (new image, loss).

    The update is ``clamp(x - step_size * g / ||g||_2, 0, 1)``.
    """
    with torch.enable_grad():
        x = image.detach().to(model.dtype).requires_grad_(True)
        loss = synthesis_loss(x, text_embedding, model, cfg, seed)
        (g,) = torch.autograd.grad(loss, x)
    if not (torch.isfinite(loss) and torch.isfinite(g).all()):
        raise NonFiniteError(f"non-finite synthesis loss/gradient at step {step_index}", step=step_index)
    with torch.no_grad():
        new = (x - cfg.step_size * g / g.norm().clamp_min(1e-30)).clamp(0, 1)
    return new, loss.item()


def full_prompt(prompt: str, prefix: str | None) -> str:
    return f"{prefix.strip()} {prompt.strip()}" if prefix else prompt.strip()


def generate(prompt: str, model, gmm: GmmInitializer, cfg: SynthesisConfig, out_dir=None, selection_model=None):
    """Initialize from the GMM, then run ``steps_K`` synthesis steps.

    ``selection_model`` scores the initial candidates (defaults to ``model``).
    When ``out_dir`` is given, PNGs (init, snapshots, final), ``loss_trace.jsonl``
    and ``manifest.json`` are written there.
    """
    model.eval()
    resolution = tuple(cfg.output_resolution or model.resolution)
    text = full_prompt(prompt, cfg.prefix)
    manifest = RunManifest(command="generate", config={**cfg.to_dict(), "prompt": prompt}, seed=cfg.seed)
    tokens = tokenize([text], model.config.context_length)
    with torch.no_grad():
        txt = encode_text(model, tokens)

    selector = selection_model or model
    init = sample_and_select(gmm, selector, tokens, cfg.candidates_per_class_M, cfg.seed, resolution).to(model.dtype)
    traj = SynthesisTrajectory(initialization=init, snapshots=[(0, init)])
    x = init
    for k in range(cfg.steps_K):
        x, loss = synthesis_step(x, txt, model, cfg, step_seed(cfg.seed, k), step_index=k)
        traj.loss_trace.append(loss)
        if cfg.snapshot_every and (k + 1) % cfg.snapshot_every == 0 and k + 1 < cfg.steps_K:
            traj.snapshots.append((k + 1, x))
    traj.snapshots.append((cfg.steps_K, x))
    traj.final = x

    with torch.no_grad():
        final_sim = cosine_similarity(encode_image(model, x), txt).item()
        init_sim = cosine_similarity(encode_image(model, init), txt).item()
    manifest.metrics_summary = {
        "initial_loss": traj.loss_trace[0],
        "final_loss": traj.loss_trace[-1],
        "initial_similarity": init_sim,
        "final_similarity": final_sim,
        "full_prompt": text,
    }
    traj.manifest = manifest
    if out_dir is not None:
        write_trajectory(traj, out_dir)
    return traj


def write_trajectory(traj: SynthesisTrajectory, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    m = traj.manifest
    m.add_artifact(save_png(traj.initialization, out_dir / "init.png"))
    for step, img in traj.snapshots[1:-1]:
        m.add_artifact(save_png(img, out_dir / f"step_{step:05d}.png"))
    m.add_artifact(save_png(traj.final, out_dir / "final.png"))
    trace_path = out_dir / "loss_trace.jsonl"
    with trace_path.open("w") as fh:
        for k, loss in enumerate(traj.loss_trace):
            fh.write(json.dumps({"step": k, "loss": loss}) + "\n")
    m.add_artifact(trace_path)
    m.add_artifact(out_dir / "manifest.json")
    return m.write(out_dir / "manifest.json")
