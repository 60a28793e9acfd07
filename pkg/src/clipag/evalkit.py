"""Caption-consistency and aesthetic metrics for generated images.

Scores follow the 0-100 CLIPScore convention (``100 * max(0, cos)``); raw
cosine similarities are reported alongside. IS/FID are not computed here;
the report schema reserves ``inception_score`` and ``fid`` for values
produced by an external scorer.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .encoders import cosine_similarity, encode_image, encode_text
from .errors import ContractError, ShapeError
from .tokenizer import tokenize

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("aesthetic_score", "preference_rate", "similarity", "r_precision", "inception_score", "fid")


@dataclass
class ScorerModel:
    """A held-out dual encoder used only for scoring."""

    encoder: object
    tag: str

    def embed_images(self, images: torch.Tensor, normalize: bool = True) -> torch.Tensor:
        with torch.no_grad():
            return encode_image(self.encoder, images, normalize)

    def embed_texts(self, texts, normalize: bool = True) -> torch.Tensor:
        tokens = tokenize(list(texts), self.encoder.config.context_length)
        with torch.no_grad():
            return encode_text(self.encoder, tokens, normalize)


def require_held_out(scorer: ScorerModel, generation_tag: str) -> None:
    if scorer.tag == generation_tag:
        raise ContractError(f"scorer tag {scorer.tag!r} equals the generation model tag; use a held-out scorer")


@dataclass
class LinearProbeScorer:
    weights: np.ndarray
    bias: float
    score_range: tuple = (1.0, 10.0)

    def __call__(self, embeddings) -> np.ndarray:
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.shape[-1] != self.weights.shape[0]:
            raise ShapeError(f"probe expects dimension {self.weights.shape[0]}, embeddings have {emb.shape[-1]}")
        return np.clip(emb @ self.weights + self.bias, *self.score_range)

    def save(self, path) -> None:
        np.savez(path, weights=self.weights, bias=self.bias, score_range=np.asarray(self.score_range))

    @classmethod
    def load(cls, path) -> "LinearProbeScorer":
        with np.load(path) as z:
            return cls(z["weights"], float(z["bias"]), tuple(float(v) for v in z["score_range"]))


def train_linear_probe(embeddings, targets, score_range=(1.0, 10.0), ridge: float = 1e-6) -> LinearProbeScorer:
    """Ridge least-squares fit of a probe (toy trainer for tests and demos)."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    xa = np.hstack([x, np.ones((x.shape[0], 1))])
    reg = ridge * np.eye(xa.shape[1])
    reg[-1, -1] = 0.0
    coef = np.linalg.solve(xa.T @ xa + reg, xa.T @ y)
    return LinearProbeScorer(coef[:-1], float(coef[-1]), tuple(score_range))


def clip_score_from_embeddings(img: torch.Tensor, txt: torch.Tensor) -> torch.Tensor:
    return 100.0 * cosine_similarity(img, txt).clamp_min(0.0)


def clip_score(images: torch.Tensor, texts, scorer: ScorerModel) -> torch.Tensor:
    """Per-pair ``100 * max(0, cos)`` under ``scorer``."""
    if images.shape[0] != len(texts):
        raise ContractError(f"clip_score needs paired inputs: {images.shape[0]} images, {len(texts)} texts")
    return clip_score_from_embeddings(scorer.embed_images(images), scorer.embed_texts(texts))


def r_precision_from_similarity(sim) -> float:
    """Fraction of rows whose argmax column is the diagonal; ties go to the lowest index."""
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] > sim.shape[1]:
        raise ShapeError(f"need an (N, P) similarity matrix with N <= P, got {sim.shape}")
    best = sim.argmax(axis=1)  # numpy returns the first maximal index
    ties = (sim == sim.max(axis=1, keepdims=True)).sum(axis=1) > 1
    if ties.any():
        log.info("r_precision: %d row(s) with tied top similarity, resolved to the lowest index", int(ties.sum()))
    return float((best == np.arange(sim.shape[0])).mean())


def r_precision(images: torch.Tensor, prompts, scorer: ScorerModel) -> float:
    """Top-1 retrieval accuracy of each image's own prompt among all ``prompts``.

    ``images[i]`` must have been generated from ``prompts[i]``.
    """
    if len(prompts) < 2:
        raise ContractError("r_precision needs at least two prompts")
    if len(set(prompts)) != len(prompts):
        log.warning("r_precision: duplicate prompts make retrieval ill-posed")
    img = scorer.embed_images(images)
    txt = scorer.embed_texts(prompts)
    return r_precision_from_similarity((img @ txt.T).cpu().numpy())


def preference_rate(scores_a, scores_b) -> float:
    """Fraction of pairs where ``a`` beats ``b``; ties count one half."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"preference_rate needs equal lengths, got {a.shape} and {b.shape}")
    if a.size == 0:
        raise ContractError("preference_rate needs at least one pair")
    return float(((a > b) + 0.5 * (a == b)).mean())


def aesthetic_score(images: torch.Tensor, probe: LinearProbeScorer, scorer: ScorerModel) -> np.ndarray:
    emb = scorer.embed_images(images).cpu().numpy()
    return probe(emb)


def evaluate_images(images, prompts, scorer: ScorerModel, probe: LinearProbeScorer | None = None, baseline=None):
    """Per-image records plus a summary row with the report columns.

    ``baseline`` (images generated by a competing method for the same
    prompts) enables the preference-rate column when a probe is given.
    """
    sims = scorer.embed_images(images) @ scorer.embed_texts(prompts).T
    raw = sims.diagonal().cpu().numpy()
    scores = clip_score(images, prompts, scorer).cpu().numpy()
    records = [
        {"index": i, "prompt": p, "clip_score": float(scores[i]), "cosine": float(raw[i])}
        for i, p in enumerate(prompts)
    ]
    summary = {c: None for c in REPORT_COLUMNS}
    summary["similarity"] = float(scores.mean())
    summary["r_precision"] = r_precision_from_similarity(sims.cpu().numpy())
    summary["scorer"] = scorer.tag
    summary["n"] = len(prompts)
    if probe is not None:
        aes = aesthetic_score(images, probe, scorer)
        for r, s in zip(records, aes):
            r["aesthetic"] = float(s)
        summary["aesthetic_score"] = float(aes.mean())
        if baseline is not None:
            summary["preference_rate"] = preference_rate(aes, aesthetic_score(baseline, probe, scorer))
    return records, summary


def write_report(records, summary, out_dir) -> list[Path]:
    """JSONL per-image records, a CSV summary and an aligned plain-text table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jsonl = out_dir / "report.jsonl"
    with jsonl.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
        fh.write(json.dumps({"summary": summary}) + "\n")
    cols = ["scorer", "n", *REPORT_COLUMNS]
    csv_path = out_dir / "summary.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        w.writerow(["" if summary.get(c) is None else summary.get(c) for c in cols])
    fmt = {c: ("-" if summary.get(c) is None else f"{summary[c]:.4g}" if isinstance(summary[c], float) else str(summary[c])) for c in cols}
    widths = {c: max(len(c), len(fmt[c])) for c in cols}
    txt = out_dir / "summary.txt"
    txt.write_text(
        "  ".join(c.ljust(widths[c]) for c in cols) + "\n" + "  ".join(fmt[c].ljust(widths[c]) for c in cols) + "\n"
    )
    return [jsonl, csv_path, txt]
