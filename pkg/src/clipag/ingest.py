"""Image-caption corpora from JSONL manifests, plus seeded source mixing.

Manifest records are one JSON object per line::

    {"image": "images/0001.png", "caption": "a red circle", "source": "toy", "label": 3}

``image`` is resolved against ``data_root`` (argument, then the
``CLIPAG_DATA_ROOT`` environment variable, then the manifest's directory).
``label`` is optional and only needed for GMM fitting.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError
from .imageio import load_png

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "CLIPAG_DATA_ROOT"

# Source mix used for the original finetune. Beyond the LAION factor the
# per-source shares are only described as roughly equal.
FULL_SCALE_MIX_PRESET = {
    "sources": ["sbu", "cc3m", "cc12m", "laion400m"],
    "proportions": [0.25, 0.25, 0.25, 0.25],
    "downsample": {"laion400m": 0.04},
    "proportions_are_approximate": True,
}


@dataclass(frozen=True)
class PairRecord:
    image: str
    caption: str
    source: str = "unknown"
    label: int | None = None


@dataclass
class PairManifest:
    records: list
    resolution: tuple = (32, 32)
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, record: PairRecord) -> Path:
        p = Path(record.image)
        return p if p.is_absolute() or self.root is None else self.root / p


def data_root(manifest_path, override=None) -> Path:
    if override is not None:
        return Path(override)
    env = os.environ.get(DATA_ROOT_ENV)
    return Path(env) if env else Path(manifest_path).parent


def read_manifest(path, resolution=(32, 32), root=None) -> PairManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(d.get("image"), str) or not d["image"]:
                raise DataError(f"{path}:{lineno}: record needs an 'image' path")
            caption = d.get("caption")
            if not isinstance(caption, str) or not caption.strip():
                raise DataError(f"{path}:{lineno}: record has an empty caption")
            records.append(PairRecord(d["image"], caption, d.get("source", "unknown"), d.get("label")))
    if not records:
        raise DataError(f"manifest {path} has no records")
    return PairManifest(records, tuple(resolution), data_root(path, root))


def _decode(manifest: PairManifest, idx: int):
    try:
        return load_png(manifest.resolve(manifest.records[idx]), manifest.resolution)[0]
    except (OSError, ValueError) as exc:
        log.warning("skipping unreadable image %s: %s", manifest.records[idx].image, exc)
        return None


def load_pairs(
    manifest_path,
    batch_size: int,
    shuffle_seed: int | None = 0,
    resolution=(32, 32),
    epochs: int | None = 1,
    max_skip_fraction: float = 0.01,
    workers: int = 2,
    drop_last: bool = False,
    debug: bool = False,
    root=None,
):
    """Yield ``(images, captions)`` batches from a manifest.

    Args:
        manifest_path: JSONL manifest.
        batch_size: records per batch.
        shuffle_seed: seed for the per-epoch permutation; ``None`` keeps file order.
        resolution: (H, W) after resizing (area filter when shrinking).
        epochs: number of passes; ``None`` loops forever.
        max_skip_fraction: unreadable images are skipped and logged until more
            than this fraction of the manifest has been skipped in an epoch.
        workers: decode threads; batch order does not depend on this.
        drop_last: drop a trailing partial batch.
        debug: re-check every yielded caption against the manifest record.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    manifest = read_manifest(manifest_path, resolution, root)
    n = len(manifest)
    cap = math.floor(max_skip_fraction * n)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 0 else None
    try:
        epoch = 0
        while epochs is None or epoch < epochs:
            order = np.arange(n)
            if shuffle_seed is not None:
                order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
            skipped = 0
            buf_img, buf_idx = [], []
            for start in range(0, n, batch_size):
                chunk = [int(i) for i in order[start : start + batch_size]]
                decoded = pool.map(lambda i: _decode(manifest, i), chunk) if pool else (_decode(manifest, i) for i in chunk)
                for i, img in zip(chunk, decoded):
                    if img is None:
                        skipped += 1
                        if skipped > cap:
                            raise DataError(
                                f"skipped {skipped}/{n} unreadable images, above the {max_skip_fraction:.1%} cap"
                            )
                        continue
                    buf_img.append(img)
                    buf_idx.append(i)
                while len(buf_img) >= batch_size:
                    yield _emit(manifest, buf_img[:batch_size], buf_idx[:batch_size], debug)
                    buf_img, buf_idx = buf_img[batch_size:], buf_idx[batch_size:]
            if buf_img and not drop_last:
                yield _emit(manifest, buf_img, buf_idx, debug)
            epoch += 1
    finally:
        if pool:
            pool.shutdown(wait=False)


def _emit(manifest: PairManifest, images, indices, debug: bool):
    captions = [manifest.records[i].caption for i in indices]
    if debug:
        for i, img, cap in zip(indices, images, captions):
            expected = _decode(manifest, i)
            if cap != manifest.records[i].caption or expected is None or not torch.equal(expected, img):
                raise DataError(f"caption/image misalignment at manifest index {i}")
    return torch.stack(images), captions


def load_labeled(manifest_path, resolution=(16, 16), root=None):
    """All labeled images of a manifest as ``(images, labels)`` for GMM fitting."""
    manifest = read_manifest(manifest_path, resolution, root)
    imgs, labels = [], []
    for i, rec in enumerate(manifest.records):
        if rec.label is None:
            raise DataError(f"record {i} ({rec.image}) has no label")
        img = _decode(manifest, i)
        if img is None:
            raise DataError(f"unreadable image {rec.image}")
        imgs.append(img)
        labels.append(int(rec.label))
    return torch.stack(imgs), np.asarray(labels)


def uniform_mix(streams, proportions, seed: int = 0, on_exhausted: str = "restart", with_source: bool = False):
    """Interleave records, drawing each record's source from ``proportions``.

    Args:
        streams: re-iterables (lists, or zero-argument callables returning
            iterators). Plain iterators work with ``on_exhausted="stop"``.
        proportions: per-stream probabilities summing to 1.
        seed: RNG seed for the source draws.
        on_exhausted: ``"restart"`` re-opens an exhausted stream, ``"stop"`` ends the mix.
        with_source: yield ``(source_index, record)`` instead of bare records.
    """
    p = np.asarray(proportions, dtype=np.float64)
    if len(streams) != len(p) or len(p) == 0:
        raise ConfigError("need one proportion per stream")
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise ConfigError(f"proportions must be non-negative and sum to 1, got {p.tolist()}")
    if on_exhausted not in ("restart", "stop"):
        raise ConfigError(f"on_exhausted must be 'restart' or 'stop', got {on_exhausted!r}")

    return _mix(streams, p, seed, on_exhausted, with_source)


def _mix(streams, p, seed, on_exhausted, with_source):
    def opener(s):
        return s if callable(s) else lambda: iter(s)

    openers = [opener(s) for s in streams]
    its = [o() for o in openers]
    rng = np.random.default_rng(seed)
    while True:
        k = int(rng.choice(len(p), p=p))
        try:
            item = next(its[k])
        except StopIteration:
            if on_exhausted == "stop":
                return
            its[k] = openers[k]()
            if its[k] is streams[k]:
                raise DataError(f"stream {k} is a one-shot iterator and cannot be restarted")
            try:
                item = next(its[k])
            except StopIteration:
                raise DataError(f"stream {k} is empty") from None
        yield (k, item) if with_source else item
