"""Dual-encoder vision-language models at desk scale.

Images are float tensors of shape (N, 3, H, W) with values in [0, 1]; mean/std
normalization happens inside the image tower so attacks and synthesis can
work directly in raw pixel units. Text arrives as (N, L) token ids from
:mod:`clipag.tokenizer`. Embeddings are plain (N, D) tensors.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CapabilityError, CheckpointError, ContractError, DegenerateInputError, ShapeError
from .tokenizer import default_tokenizer

log = logging.getLogger(__name__)

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
UNIT_NORM_TOL = 1e-5
CHECKPOINT_FORMAT = "clipag-checkpoint"
CHECKPOINT_VERSION = 1

_VIT_RE = re.compile(r"^vit_small_patch(\d+)$")


@dataclass
class EncoderConfig:
    arch: str = "conv_small"
    image_size: int = 32
    embed_dim: int = 64
    width: int = 64
    depth: int = 2
    heads: int = 4
    context_length: int = 16
    vocab_size: int = field(default_factory=lambda: default_tokenizer().vocab_size)
    text_width: int = 64
    text_layers: int = 1
    text_heads: int = 4
    init_logit_scale: float = math.log(1 / 0.07)
    pixel_mean: tuple = CLIP_MEAN
    pixel_std: tuple = CLIP_STD

    def __post_init__(self):
        self.pixel_mean = tuple(self.pixel_mean)
        self.pixel_std = tuple(self.pixel_std)
        if self.arch not in ("toy_mlp", "conv_small") and not _VIT_RE.match(self.arch):
            raise ContractError(
                f"unknown arch {self.arch!r}; expected toy_mlp, conv_small or vit_small_patch<P>"
            )
        if self.patch_size and self.image_size % self.patch_size:
            raise ContractError(f"image_size {self.image_size} not divisible by patch {self.patch_size}")

    @property
    def patch_size(self) -> int | None:
        m = _VIT_RE.match(self.arch)
        return int(m.group(1)) if m else None


class PixelNormalize(nn.Module):
    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)

    def forward(self, x, causal: bool = False):
        n, t, c = x.shape
        q, k, v = self.qkv(x).view(n, t, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(c // self.heads)
        if causal:
            mask = torch.ones(t, t, dtype=torch.bool, device=x.device).triu(1)
            att = att.masked_fill(mask, float("-inf"))
        y = att.softmax(dim=-1) @ v
        return self.out(y.transpose(1, 2).reshape(n, t, c))


class Block(nn.Module):
    def __init__(self, width: int, heads: int, causal: bool = False):
        super().__init__()
        self.causal = causal
        self.ln1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x):
        x = x + self.attn(self.ln1(x), causal=self.causal)
        return x + self.mlp(self.ln2(x))


class ToyMLPVisual(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.norm = PixelNormalize(cfg.pixel_mean, cfg.pixel_std)
        self.net = nn.Sequential(
            nn.Flatten(),
            nn.Linear(3 * cfg.image_size**2, cfg.width),
            nn.GELU(),
            nn.Linear(cfg.width, cfg.embed_dim),
        )

    def spatial_layers(self) -> dict[str, nn.Module]:
        return {}

    def forward(self, x):
        return self.net(self.norm(x))


class ConvVisual(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        w = cfg.width
        self.norm = PixelNormalize(cfg.pixel_mean, cfg.pixel_std)
        self.conv1 = nn.Sequential(nn.Conv2d(3, w // 2, 3, padding=1), nn.GELU())
        self.conv2 = nn.Sequential(nn.Conv2d(w // 2, w, 3, stride=2, padding=1), nn.GELU())
        self.conv3 = nn.Sequential(nn.Conv2d(w, w, 3, stride=2, padding=1), nn.GELU())
        self.proj = nn.Linear(w, cfg.embed_dim)

    def spatial_layers(self) -> dict[str, nn.Module]:
        return {"conv1": self.conv1, "conv2": self.conv2, "conv3": self.conv3}

    def forward(self, x):
        h = self.conv3(self.conv2(self.conv1(self.norm(x))))
        return self.proj(h.mean(dim=(2, 3)))


class ViTVisual(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        p, w = cfg.patch_size, cfg.width
        self.grid = cfg.image_size // p
        self.norm = PixelNormalize(cfg.pixel_mean, cfg.pixel_std)
        self.patch = nn.Conv2d(3, w, p, stride=p)
        self.cls = nn.Parameter(torch.randn(1, 1, w) * 0.02)
        self.pos = nn.Parameter(torch.randn(1, 1 + self.grid**2, w) * 0.02)
        self.blocks = nn.ModuleList(Block(w, cfg.heads) for _ in range(cfg.depth))
        self.ln = nn.LayerNorm(w)
        self.proj = nn.Linear(w, cfg.embed_dim)

    def spatial_layers(self) -> dict[str, nn.Module]:
        return {f"blocks.{i}": b for i, b in enumerate(self.blocks)}

    def forward(self, x):
        h = self.patch(self.norm(x)).flatten(2).transpose(1, 2)
        h = torch.cat([self.cls.expand(h.shape[0], -1, -1), h], dim=1) + self.pos
        for blk in self.blocks:
            h = blk(h)
        return self.proj(self.ln(h[:, 0]))


class TextTransformer(nn.Module):
    def __init__(self, cfg: EncoderConfig, eot_id: int):
        super().__init__()
        self.eot_id = eot_id
        self.token = nn.Embedding(cfg.vocab_size, cfg.text_width)
        self.pos = nn.Parameter(torch.randn(cfg.context_length, cfg.text_width) * 0.01)
        self.blocks = nn.ModuleList(
            Block(cfg.text_width, cfg.text_heads, causal=True) for _ in range(cfg.text_layers)
        )
        self.ln = nn.LayerNorm(cfg.text_width)
        self.proj = nn.Linear(cfg.text_width, cfg.embed_dim)

    def forward(self, tokens):
        h = self.token(tokens) + self.pos[: tokens.shape[1]]
        for blk in self.blocks:
            h = blk(h)
        h = self.ln(h)
        eot_pos = (tokens == self.eot_id).int().argmax(dim=1)
        return self.proj(h[torch.arange(h.shape[0]), eot_pos])


class DualEncoder(nn.Module):
    """Image tower + text tower sharing a joint space of size ``embed_dim``.

    ``logit_scale`` is stored in log space, so ``scale = exp(logit_scale)``
    is always positive.
    """

    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = config or EncoderConfig()
        cfg = self.config
        if cfg.arch == "toy_mlp":
            self.visual = ToyMLPVisual(cfg)
        elif cfg.arch == "conv_small":
            self.visual = ConvVisual(cfg)
        else:
            self.visual = ViTVisual(cfg)
        self.text = TextTransformer(cfg, default_tokenizer().eot_id)
        self.logit_scale = nn.Parameter(torch.tensor(float(cfg.init_logit_scale)))

    @property
    def arch_tag(self) -> str:
        return self.config.arch

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.config.image_size, self.config.image_size)

    @property
    def scale(self) -> torch.Tensor:
        return self.logit_scale.exp()

    @property
    def dtype(self) -> torch.dtype:
        return self.logit_scale.dtype

    def image_parameters(self):
        return list(self.visual.parameters())

    def text_parameters(self):
        return list(self.text.parameters())


def build_model(config: EncoderConfig | None = None, seed: int = 0) -> DualEncoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = DualEncoder(config)
    return model.eval()


def check_images(model: DualEncoder, images: torch.Tensor) -> None:
    if images.dim() != 4 or images.shape[0] < 1 or images.shape[1] != 3:
        raise ShapeError(f"expected images of shape (N>=1, 3, H, W), got {tuple(images.shape)}")
    if tuple(images.shape[2:]) != model.resolution:
        raise ShapeError(
            f"resolution mismatch: model expects {model.resolution}, got {tuple(images.shape[2:])}"
        )


def encode_image(model: DualEncoder, images: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    check_images(model, images)
    emb = model.visual(images.to(model.dtype))
    return F.normalize(emb, dim=-1) if normalize else emb


def encode_text(model: DualEncoder, tokens: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    if tokens.dim() != 2 or tokens.shape[1] > model.config.context_length:
        raise ShapeError(
            f"expected tokens of shape (N, <= {model.config.context_length}), got {tuple(tokens.shape)}"
        )
    if tokens.min() < 0 or tokens.max() >= model.config.vocab_size:
        raise ShapeError(f"token ids outside vocabulary range [0, {model.config.vocab_size})")
    emb = model.text(tokens)
    return F.normalize(emb, dim=-1) if normalize else emb


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity of two (N, D) tensors, clipped to [-1, 1]."""
    if a.shape != b.shape:
        raise ShapeError(f"embedding shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if bool((na == 0).any() or (nb == 0).any()):
        raise DegenerateInputError("cosine similarity undefined for a zero-norm embedding row")
    return ((a * b).sum(dim=-1) / (na * nb)).clamp(-1.0, 1.0)


def _check_unit(x: torch.Tensor, name: str) -> None:
    norms = x.detach().norm(dim=-1)
    if bool(((norms - 1).abs() > UNIT_NORM_TOL).any()):
        raise ContractError(f"{name} embeddings must be unit-normalized (row norms {norms.tolist()})")


def similarity_matrix(img: torch.Tensor, txt: torch.Tensor, scale=1.0) -> torch.Tensor:
    """``scale * img @ txt.T`` for unit-normalized, equally sized batches."""
    if img.shape != txt.shape:
        raise ShapeError(f"image/text embedding shapes differ: {tuple(img.shape)} vs {tuple(txt.shape)}")
    _check_unit(img, "image")
    _check_unit(txt, "text")
    return scale * (img @ txt.T)


def image_input_gradient(model, images, tokens, objective: str = "maximize_cosine") -> torch.Tensor:
    """Gradient of the mean matching-pair cosine similarity w.r.t. pixels.

    ``minimize_cosine`` returns the exact negation. Parameter ``.grad`` fields
    are never touched.
    """
    if objective not in ("maximize_cosine", "minimize_cosine"):
        raise ContractError(f"unknown objective {objective!r}")
    if images.shape[0] != tokens.shape[0]:
        raise ContractError(f"need one caption per image: {images.shape[0]} images, {tokens.shape[0]} captions")
    if torch.is_inference_mode_enabled():
        raise CapabilityError("input gradients are unavailable inside torch.inference_mode()")
    with torch.enable_grad():
        x = images.detach().to(model.dtype).requires_grad_(True)
        with torch.no_grad():
            txt = encode_text(model, tokens)
        sim = cosine_similarity(encode_image(model, x), txt).mean()
        (grad,) = torch.autograd.grad(sim, x)
    return grad if objective == "maximize_cosine" else -grad


def parameter_hash(params) -> str:
    """sha256 over the raw bytes of a parameter collection (order-sensitive)."""
    if isinstance(params, nn.Module):
        params = [t for _, t in sorted(params.state_dict().items())]
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def probe_batch(model: DualEncoder):
    g = torch.Generator().manual_seed(1234)
    images = torch.rand((2, 3, *model.resolution), generator=g, dtype=model.dtype)
    tokens = default_tokenizer()(["a probe image", "another probe"], model.config.context_length)
    return images, tokens


def probe_hash(model: DualEncoder) -> str:
    images, tokens = probe_batch(model)
    with torch.no_grad():
        emb = torch.cat([encode_image(model, images, False), encode_text(model, tokens, False)])
    return hashlib.sha256(emb.cpu().numpy().tobytes()).hexdigest()


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_checkpoint(model: DualEncoder, path, training_config: dict | None = None) -> Path:
    """Write ``path`` (tensor blob) and ``path.json`` (metadata header)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({k: v.detach().clone() for k, v in model.state_dict().items()}, path)
    blob_hash = hashlib.sha256(path.read_bytes()).hexdigest()
    cfg_hash = hashlib.sha256(json.dumps(training_config or {}, sort_keys=True).encode()).hexdigest()
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch_tag": model.arch_tag,
        "embed_dim": model.config.embed_dim,
        "resolution": list(model.resolution),
        "dtype": str(model.dtype).replace("torch.", ""),
        "training_config_hash": cfg_hash,
        "blob_sha256": blob_hash,
        "probe_hash": probe_hash(model),
        "encoder_config": asdict(model.config),
    }
    _sidecar(path).write_text(json.dumps(header, indent=2))
    return path


def read_header(path) -> dict:
    path = Path(path)
    side = _sidecar(path)
    if not path.exists() or not side.exists():
        raise CheckpointError(f"checkpoint not found: {path} (and/or {side.name})")
    try:
        header = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint header {side}: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{side} is not a {CHECKPOINT_FORMAT} header")
    return header


def load_checkpoint(path, expected_arch: str | None = None) -> DualEncoder:
    path = Path(path)
    header = read_header(path)
    if expected_arch is not None and header["arch_tag"] != expected_arch:
        raise CheckpointError(f"arch_tag mismatch: expected {expected_arch}, checkpoint has {header['arch_tag']}")
    if hashlib.sha256(path.read_bytes()).hexdigest() != header["blob_sha256"]:
        raise CheckpointError(f"corrupt checkpoint {path}: blob hash does not match header")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of unpickling errors
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    model = DualEncoder(EncoderConfig(**header["encoder_config"]))
    model.to(getattr(torch, header["dtype"]))
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {path} does not match arch {header['arch_tag']}: {exc}") from exc
    model.eval()
    if probe_hash(model) != header["probe_hash"]:
        log.warning("probe-batch embeddings of %s differ from the recorded hash", path)
    return model
