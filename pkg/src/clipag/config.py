"""Strict YAML run configs and named presets.

A config file is a mapping with optional sections ``encoder``, ``train``
(with a nested ``threat``), ``synthesis``, ``smoothing``, ``gmm``, ``data``
and ``explain``. Unknown keys anywhere raise :class:`ConfigError` naming the
dotted key. Precedence is CLI flag > file > built-in default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .advtrain import TrainConfig
from .encoders import EncoderConfig
from .errors import ClipagError, ConfigError
from .explain import EXPLAIN_THREAT
from .smoothing import SmoothingConfig
from .synthesis import SynthesisConfig
from .threat import ThreatModel


@dataclass
class GmmConfig:
    low_resolution: int = 16
    num_classes: int = 200
    covariance_mode: str = "diag"
    shrinkage: float = 0.0

    def __post_init__(self):
        if self.covariance_mode not in ("diag", "full"):
            raise ConfigError(f"covariance_mode must be 'diag' or 'full', got {self.covariance_mode!r}")


@dataclass
class DataConfig:
    manifest: str | None = None
    gmm_manifest: str | None = None
    heldout_manifest: str | None = None
    shuffle_seed: int = 0
    max_skip_fraction: float = 0.01
    workers: int = 2
    proportions: list | None = None
    on_exhausted: str = "restart"


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    gmm: GmmConfig = field(default_factory=GmmConfig)
    data: DataConfig = field(default_factory=DataConfig)
    explain: ThreatModel = EXPLAIN_THREAT

    def to_dict(self) -> dict:
        return {
            "encoder": dataclasses.asdict(self.encoder),
            "train": self.train.to_dict(),
            "synthesis": self.synthesis.to_dict(),
            "smoothing": dataclasses.asdict(self.smoothing),
            "gmm": dataclasses.asdict(self.gmm),
            "data": dataclasses.asdict(self.data),
            "explain": self.explain.to_dict(),
        }


_SECTIONS = {
    "encoder": EncoderConfig,
    "train": TrainConfig,
    "synthesis": SynthesisConfig,
    "smoothing": SmoothingConfig,
    "gmm": GmmConfig,
    "data": DataConfig,
    "explain": ThreatModel,
}
_DERIVED = {"train": {"effective_batch"}}


def _build(cls, values, where: str, base=None):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(values).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in names and key not in _DERIVED.get(where, ()):
            raise ConfigError(f"unknown config key {where}.{key}")
    merged = dataclasses.asdict(base) if base is not None else {}
    merged = {k: v for k, v in merged.items() if k in names}
    for key, val in values.items():
        if key in _DERIVED.get(where, ()):
            continue
        if cls is TrainConfig and key == "threat":
            val = _build(ThreatModel, val, f"{where}.threat", base.threat if base is not None else None)
        merged[key] = val
    try:
        return cls(**merged)
    except ClipagError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(d: dict | None, base: RunConfig | None = None) -> RunConfig:
    d = d or {}
    if not isinstance(d, dict):
        raise ConfigError("config root must be a mapping")
    base = base or RunConfig()
    out = dataclasses.replace(base)
    for key, val in d.items():
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config key {key}")
        setattr(out, key, _build(_SECTIONS[key], val, key, getattr(base, key)))
    if "effective_batch" in d.get("train", {}) and d["train"]["effective_batch"] != out.train.effective_batch:
        raise ConfigError(
            f"train.effective_batch={d['train']['effective_batch']} disagrees with "
            f"batch_size*accumulation_steps*devices={out.train.effective_batch}"
        )
    return out


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    return from_dict(data, base)


def dump_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(_plain(cfg.to_dict()), sort_keys=True))
    return path


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


# Constants of the original full-scale setup.
FULL_SCALE_THREAT_L2 = ThreatModel(norm="L2", epsilon=1.5, steps=5)
FULL_SCALE_THREAT_LINF = ThreatModel(norm="Linf", epsilon=8 / 255, steps=20, step_size=1 / 255)
FULL_SCALE_THREAT_LINF_ABLATION = ThreatModel(norm="Linf", epsilon=2 / 255, steps=5)


def full_preset() -> RunConfig:
    """Full-scale constants: 224px images, 8 devices x 512 x 10 accumulation."""
    return RunConfig(
        encoder=EncoderConfig(arch="vit_small_patch16", image_size=224),
        train=TrainConfig(
            threat=FULL_SCALE_THREAT_L2,
            learning_rate=2e-5,
            weight_decay=1e-4,
            batch_size=512,
            accumulation_steps=10,
            devices=8,
            freeze_text=True,
            freeze_logit_scale=True,
        ),
        synthesis=SynthesisConfig(steps_K=1000, output_resolution=(224, 224)),
        gmm=GmmConfig(low_resolution=16, num_classes=200),
        explain=FULL_SCALE_THREAT_LINF,
    )


def scale_epsilon(epsilon: float, from_resolution: int, to_resolution: int) -> float:
    """Rescale an L2 radius so the mean per-pixel change stays constant."""
    return epsilon * to_resolution / from_resolution


def desk_preset() -> RunConfig:
    """Small CPU setup on the toy corpus (32px conv encoder).

    The L2 radius keeps the full-scale mean per-pixel change: 1.5 at 224px
    becomes about 0.214 at 32px.
    """
    eps = scale_epsilon(FULL_SCALE_THREAT_L2.epsilon, 224, 32)
    return RunConfig(
        encoder=EncoderConfig(arch="conv_small", width=32, image_size=32),
        train=TrainConfig(
            threat=ThreatModel(norm="L2", epsilon=eps, steps=5),
            learning_rate=1e-3,
            batch_size=64,
            total_steps=300,
            warmup_steps=10,
        ),
        synthesis=SynthesisConfig(steps_K=200, step_size=0.25, snapshot_every=50),
        gmm=GmmConfig(low_resolution=16, num_classes=40),
    )


PRESETS = {"full": full_preset, "desk": desk_preset}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()


