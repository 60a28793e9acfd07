"""Multimodal adversarial finetuning with a frozen text tower.

Inner loop: PGD pushes each image away from its own caption embedding.
Outer loop: the image tower is updated so the perturbed images match their
captions again, using symmetric InfoNCE over the batch (or plain cosine).
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .encoders import cosine_similarity, encode_image, encode_text, save_checkpoint, similarity_matrix
from .errors import ConfigError, NonFiniteError
from .losses import contrastive_loss, pairwise_cosine_attack_loss
from .manifest import RunManifest
from .threat import ThreatModel, pgd_attack
from .tokenizer import tokenize

__all__ = [
    "TrainConfig",
    "TrainMetrics",
    "AdversarialFinetuner",
    "contrastive_loss",
    "pairwise_cosine_attack_loss",
    "finetune_step",
    "finetune",
]

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    threat: ThreatModel = field(default_factory=ThreatModel)
    learning_rate: float = 2e-5
    weight_decay: float = 1e-4
    batch_size: int = 64
    accumulation_steps: int = 1
    devices: int = 1
    total_steps: int = 100
    warmup_steps: int = 0
    schedule: str = "cosine"
    outer_loss: str = "contrastive"
    freeze_text: bool = True
    freeze_logit_scale: bool = True
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.threat, dict):
            self.threat = ThreatModel(**self.threat)
        if self.accumulation_steps < 1 or self.batch_size < 1 or self.devices < 1:
            raise ConfigError("batch_size, accumulation_steps and devices must all be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        if self.outer_loss not in ("contrastive", "cosine"):
            raise ConfigError(f"outer_loss must be 'contrastive' or 'cosine', got {self.outer_loss!r}")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.accumulation_steps * self.devices

    def to_dict(self) -> dict:
        d = asdict(self)
        d["effective_batch"] = self.effective_batch
        return d


@dataclass
class TrainMetrics:
    step: int
    clean_diag_sim: float
    adv_diag_sim: float
    contrastive_loss: float = float("nan")
    grad_norm: float = float("nan")
    lr: float = float("nan")
    stepped: bool = False
    attack_loss_trace: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _lr_lambda(cfg: TrainConfig):
    def fn(step):
        if cfg.warmup_steps and step < cfg.warmup_steps:
            return (step + 1) / cfg.warmup_steps
        if cfg.schedule == "constant":
            return 1.0
        span = max(1, cfg.total_steps - cfg.warmup_steps)
        progress = min(1.0, (step - cfg.warmup_steps) / span)
        return 0.5 * (1 + math.cos(math.pi * progress))

    return fn


class AdversarialFinetuner:
    """Stateful driver for the finetuning step.

    Call :meth:`step` once per micro-batch; the optimizer fires on every
    ``accumulation_steps``-th call. Accumulation caches per-chunk features and
    re-runs each chunk with grad against the cached rest of the batch, so the
    update equals that of a single big batch.
    """

    def __init__(self, model, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        for p in model.text_parameters():
            p.requires_grad_(not cfg.freeze_text)
        model.logit_scale.requires_grad_(not cfg.freeze_logit_scale)
        for p in model.image_parameters():
            p.requires_grad_(True)
        self.trainable = [p for p in model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.AdamW(self.trainable, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(self.optimizer, _lr_lambda(cfg))
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.global_step = 0
        self.micro_step = 0
        self._pending: list[tuple[torch.Tensor, torch.Tensor]] = []
        self._traces: list[list[float]] = []

    def state_dict(self) -> dict:
        return {
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "generator": self.generator.get_state(),
            "global_step": self.global_step,
            "micro_step": self.micro_step,
        }

    def load_state_dict(self, state: dict) -> None:
        self.optimizer.load_state_dict(state["optimizer"])
        self.scheduler.load_state_dict(state["scheduler"])
        self.generator.set_state(state["generator"])
        self.global_step = state["global_step"]
        self.micro_step = state["micro_step"]

    def _text_features(self, tokens, grad: bool):
        with torch.set_grad_enabled(grad):
            return encode_text(self.model, tokens)

    def step(self, images: torch.Tensor, tokens: torch.Tensor) -> TrainMetrics:
        model, cfg = self.model, self.cfg
        images = images.to(model.dtype)
        txt = self._text_features(tokens, grad=False)
        with torch.no_grad():
            model.eval()
            clean = cosine_similarity(encode_image(model, images), txt).mean().item()
        if cfg.threat.epsilon > 0:
            res = pgd_attack(model, images, None, cfg.threat, text_embeddings=txt, generator=self.generator)
            adv, adv_sim, trace = res.adversarial, res.final_similarity.mean().item(), res.loss_trace
        else:
            adv, adv_sim, trace = images, clean, []
        self.micro_step += 1
        self._pending.append((adv, tokens))
        self._traces.append(trace)
        metrics = TrainMetrics(self.global_step, clean, adv_sim, attack_loss_trace=trace)
        if len(self._pending) < cfg.accumulation_steps:
            return metrics

        loss, grad_norm = self._outer_update()
        metrics.contrastive_loss = loss
        metrics.grad_norm = grad_norm
        metrics.lr = self.optimizer.param_groups[0]["lr"]
        self.scheduler.step()
        self.global_step += 1
        metrics.step = self.global_step
        metrics.stepped = True
        return metrics

    def _outer_loss(self, img, txt, scale):
        if self.cfg.outer_loss == "cosine":
            return pairwise_cosine_attack_loss(img, txt)
        return contrastive_loss(similarity_matrix(img, txt, scale))

    def _outer_update(self) -> tuple[float, float]:
        model, cfg = self.model, self.cfg
        chunks, traces = self._pending, self._traces
        self._pending, self._traces = [], []
        model.train()
        with torch.no_grad():
            img_cache = [encode_image(model, a) for a, _ in chunks]
            txt_cache = [encode_text(model, t) for _, t in chunks]
        self.optimizer.zero_grad(set_to_none=True)
        loss_value = None
        for j, (adv, tok) in enumerate(chunks):
            img = img_cache[:j] + [encode_image(model, adv)] + img_cache[j + 1 :]
            txt = txt_cache
            if not cfg.freeze_text:
                txt = txt_cache[:j] + [encode_text(model, tok)] + txt_cache[j + 1 :]
            # the scale enters every chunk's loss; count its gradient once
            scale = model.scale if j == 0 else model.scale.detach()
            loss = self._outer_loss(torch.cat(img), torch.cat(txt), scale)
            if not torch.isfinite(loss):
                self.optimizer.zero_grad(set_to_none=True)
                model.eval()
                raise NonFiniteError(
                    f"non-finite outer loss at step {self.global_step}, chunk {j}",
                    batch_index=self.micro_step - len(chunks) + j,
                    step=self.global_step,
                    loss=loss.item(),
                    attack_loss_traces=traces,
                )
            loss.backward()
            loss_value = loss.item()
        grad_norm = math.sqrt(sum(float(p.grad.pow(2).sum()) for p in self.trainable if p.grad is not None))
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        model.eval()
        return loss_value, grad_norm


def finetune_step(trainer: AdversarialFinetuner, images, tokens) -> TrainMetrics:
    return trainer.step(images, tokens)


def _save_state(path: Path, trainer: AdversarialFinetuner, cursor: int) -> None:
    state = {
        "model": trainer.model.state_dict(),
        "trainer": trainer.state_dict(),
        "cursor": cursor,
        "torch_rng": torch.get_rng_state(),
    }
    tmp = path.with_suffix(".tmp")
    torch.save(state, tmp)
    tmp.replace(path)


def finetune(model, stream, cfg: TrainConfig, out_dir, resume: bool = True, context_length: int | None = None):
    """Run the finetuning loop over ``stream`` of ``(images, captions)`` batches.

    Writes ``metrics.jsonl`` (one record per optimizer step), periodic
    ``train_state.pt`` snapshots, ``final.pt`` and ``manifest.json`` under
    ``out_dir``. With ``resume=True`` an existing snapshot is restored and the
    first ``cursor`` batches of ``stream`` are skipped, so the caller must
    supply the same deterministic stream.

    Returns:
        (final checkpoint path, list of TrainMetrics for this invocation)
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    context_length = context_length or model.config.context_length
    state_path = out_dir / "train_state.pt"
    metrics_path = out_dir / "metrics.jsonl"
    manifest = RunManifest(command="finetune", config=cfg.to_dict(), seed=cfg.seed)

    trainer = AdversarialFinetuner(model, cfg)
    cursor = 0
    if resume and state_path.exists():
        state = torch.load(state_path, weights_only=False)
        model.load_state_dict(state["model"])
        trainer.load_state_dict(state["trainer"])
        torch.set_rng_state(state["torch_rng"])
        cursor = state["cursor"]
        log.info("resumed from %s at step %d (cursor %d)", state_path, trainer.global_step, cursor)
        # drop records written after the snapshot
        if metrics_path.exists():
            kept = [
                line for line in metrics_path.read_text().splitlines()
                if line and json.loads(line)["step"] <= trainer.global_step
            ]
            metrics_path.write_text("".join(k + "\n" for k in kept))
    elif metrics_path.exists():
        metrics_path.unlink()

    history = []
    if trainer.global_step < cfg.total_steps:
        with metrics_path.open("a") as fh:
            for images, captions in itertools.islice(stream, cursor, None):
                cursor += 1
                m = trainer.step(images, tokenize(list(captions), context_length))
                if not m.stepped:
                    continue
                history.append(m)
                fh.write(json.dumps(m.to_dict()) + "\n")
                fh.flush()
                if cfg.checkpoint_every and m.step % cfg.checkpoint_every == 0:
                    _save_state(state_path, trainer, cursor)
                if m.step >= cfg.total_steps:
                    break
    if trainer.global_step < cfg.total_steps:
        log.warning("stream exhausted after %d/%d steps", trainer.global_step, cfg.total_steps)
    _save_state(state_path, trainer, cursor)

    final = save_checkpoint(model, out_dir / "final.pt", training_config=cfg.to_dict())
    manifest.checkpoint = str(final)
    for p in (final, final.with_name(final.name + ".json"), metrics_path, state_path):
        manifest.add_artifact(p)
    if history:
        last = history[-1]
        manifest.metrics_summary = {
            "steps": last.step,
            "final_contrastive_loss": last.contrastive_loss,
            "final_clean_diag_sim": last.clean_diag_sim,
            "final_adv_diag_sim": last.adv_diag_sim,
        }
    manifest.write(out_dir / "manifest.json")
    return final, history
