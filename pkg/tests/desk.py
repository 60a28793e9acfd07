"""Desk-scale model zoo shared by the acceptance tests.

Three conv encoders on the procedural shapes corpus:

* ``vanilla``: contrastive pretraining from scratch (no attack).
* ``robust``: ``vanilla`` adversarially finetuned with ``finetune`` (L2, frozen text tower).
* ``scorer``: a separately seeded model trained on a disjoint corpus, used
  only for held-out scoring.

Trained models are cached under the pytest cache keyed by a hash of the
package sources and the recipe, so edits to the library retrain them.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import torch

import clipag
from clipag.advtrain import AdversarialFinetuner, TrainConfig, finetune
from clipag.config import scale_epsilon
from clipag.encoders import EncoderConfig, build_model, load_checkpoint, save_checkpoint
from clipag.threat import ThreatModel
from clipag.tokenizer import tokenize
from clipag.toydata import sample_pairs

RECIPE = {
    "encoder": {"arch": "conv_small", "width": 32, "image_size": 32},
    "corpus": {"n": 4000, "seed": 0},
    "scorer_corpus": {"n": 4000, "seed": 7},
    "pretrain": {"steps": 1500, "lr": 2e-3, "warmup": 50, "batch": 64},
    "robust": {"epsilon": scale_epsilon(1.5, 224, 32), "steps": 5, "train_steps": 300, "lr": 1e-3, "warmup": 10, "batch": 64},
}


def recipe_key() -> str:
    h = hashlib.sha256(json.dumps(RECIPE, sort_keys=True).encode())
    for path in sorted(Path(clipag.__file__).parent.rglob("*.py")):
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def shuffled_batches(images, captions, batch_size: int, seed: int):
    g = torch.Generator().manual_seed(seed)
    while True:
        perm = torch.randperm(len(images), generator=g)
        for i in range(0, len(images) - batch_size + 1, batch_size):
            idx = perm[i : i + batch_size]
            yield images[idx], [captions[j] for j in idx.tolist()]


def pretrain(images, captions, seed: int, batch_seed: int):
    r = RECIPE["pretrain"]
    model = build_model(EncoderConfig(**RECIPE["encoder"]), seed=seed)
    cfg = TrainConfig(
        threat=ThreatModel("L2", 0.0, 1),
        learning_rate=r["lr"],
        batch_size=r["batch"],
        total_steps=r["steps"],
        warmup_steps=r["warmup"],
        freeze_text=False,
        freeze_logit_scale=False,
        seed=seed,
    )
    trainer = AdversarialFinetuner(model, cfg)
    stream = shuffled_batches(images, captions, r["batch"], batch_seed)
    for _ in range(r["steps"]):
        x, caps = next(stream)
        trainer.step(x, tokenize(caps, model.config.context_length))
    return model.eval()


def robust_config() -> TrainConfig:
    r = RECIPE["robust"]
    return TrainConfig(
        threat=ThreatModel("L2", r["epsilon"], r["steps"]),
        learning_rate=r["lr"],
        batch_size=r["batch"],
        total_steps=r["train_steps"],
        warmup_steps=r["warmup"],
    )


def build_zoo(cache_dir: Path) -> dict:
    cache_dir = Path(cache_dir) / recipe_key()
    cache_dir.mkdir(parents=True, exist_ok=True)
    paths = {k: cache_dir / f"{k}.pt" for k in ("vanilla", "robust", "scorer")}
    if not all(p.exists() for p in paths.values()):
        x, caps, _ = sample_pairs(RECIPE["corpus"]["n"], 32, seed=RECIPE["corpus"]["seed"])
        vanilla = pretrain(x, caps, seed=0, batch_seed=0)
        save_checkpoint(vanilla, paths["vanilla"])
        robust = copy.deepcopy(vanilla)
        final, _ = finetune(
            robust, shuffled_batches(x, caps, RECIPE["robust"]["batch"], 1), robust_config(), cache_dir / "robust_run"
        )
        paths["robust"].write_bytes(final.read_bytes())
        paths["robust"].with_name("robust.pt.json").write_bytes(final.with_name("final.pt.json").read_bytes())
        xs, cs, _ = sample_pairs(RECIPE["scorer_corpus"]["n"], 32, seed=RECIPE["scorer_corpus"]["seed"])
        save_checkpoint(pretrain(xs, cs, seed=1, batch_seed=2), paths["scorer"])
    zoo = {k: load_checkpoint(p) for k, p in paths.items()}
    zoo["paths"] = paths
    zoo["run_dir"] = cache_dir / "robust_run"
    return zoo
