"""``clipag`` command line: finetune, generate, attack, evaluate, explain, gradients.

Every command writes its artifacts plus ``manifest.json`` under ``--out-dir``.
Failures print one line ``error: category=<name> <message>`` on stderr and
exit with a category-specific code (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .encoders import build_model, encode_image, encode_text, image_input_gradient, load_checkpoint
from .errors import CapabilityError, CheckpointError, ClipagError, ConfigError
from .imageio import load_png, save_png
from .manifest import RunManifest
from .threat import ThreatModel, pgd_attack
from .tokenizer import tokenize

log = logging.getLogger("clipag")

DEVICE_ENV = "CLIPAG_DEVICE"

EXIT_CODES = {
    "config": 2,
    "checkpoint": 3,
    "non_finite": 4,
    "data": 5,
    "contract": 6,
    "shape": 6,
    "tokenizer": 6,
    "degenerate_input": 6,
    "capability": 7,
    "error": 1,
}


def _device() -> torch.device:
    name = os.environ.get(DEVICE_ENV, "cpu")
    try:
        dev = torch.device(name)
    except RuntimeError as exc:
        raise ConfigError(f"{DEVICE_ENV}={name!r} is not a device") from exc
    if dev.type == "cuda" and not torch.cuda.is_available():
        raise CapabilityError(f"{DEVICE_ENV}={name} requested but CUDA is unavailable")
    return dev


def resolve_config(args) -> cfgmod.RunConfig:
    """Preset, then config file, then CLI flags."""
    cfg = cfgmod.preset(args.preset)
    if args.config:
        cfg = cfgmod.load_config(args.config, base=cfg)
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.synthesis.seed = args.seed
        cfg.smoothing = dataclasses.replace(cfg.smoothing, seed=args.seed)
    threat_flags = {
        k: v
        for k, v in (("norm", getattr(args, "threat_norm", None)), ("epsilon", getattr(args, "epsilon", None)))
        if v is not None
    }
    if getattr(args, "steps", None) is not None and args.command in ("finetune", "attack"):
        threat_flags["steps"] = args.steps
    if threat_flags:
        cur = cfg.train.threat.to_dict()
        if "epsilon" in threat_flags or "steps" in threat_flags:
            cur["step_size"] = None
        cfg.train.threat = ThreatModel(**{**cur, **threat_flags})
    if args.command == "generate":
        if args.steps is not None:
            cfg.synthesis.steps_K = args.steps
        if args.prefix is not None:
            cfg.synthesis.prefix = args.prefix
    return cfg


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else cfg.train.seed


def _load_model(path, required=True, encoder_cfg=None, seed=0):
    if path is None:
        if required:
            raise CheckpointError("--checkpoint is required for this command")
        return build_model(encoder_cfg, seed=seed)
    return load_checkpoint(path).to(_device())


def _out_dir(args, manifest: RunManifest) -> Path:
    out = Path(args.out_dir) if args.out_dir else Path("runs") / f"{args.command}-{manifest.run_id}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _new_manifest(args, cfg, extra=None) -> RunManifest:
    return RunManifest(
        command=args.command,
        config={**cfg.to_dict(), **(extra or {})},
        seed=_seed(args, cfg),
        checkpoint=getattr(args, "checkpoint", None),
    )


def cmd_finetune(args) -> int:
    from .advtrain import finetune
    from .ingest import load_pairs

    cfg = resolve_config(args)
    manifest_path = args.manifest or cfg.data.manifest
    if manifest_path is None:
        raise ConfigError("finetune needs a data manifest (--manifest or data.manifest)")
    model = _load_model(args.checkpoint, required=False, encoder_cfg=cfg.encoder, seed=cfg.train.seed)
    res = model.config.image_size
    stream = load_pairs(
        manifest_path,
        cfg.train.batch_size,
        cfg.data.shuffle_seed,
        resolution=(res, res),
        epochs=None,
        max_skip_fraction=cfg.data.max_skip_fraction,
        workers=cfg.data.workers,
    )
    run = _new_manifest(args, cfg)
    out = _out_dir(args, run)
    final, history = finetune(model, stream, cfg.train, out, resume=not args.no_resume)
    # enrich the loop's manifest with the full effective config
    m = RunManifest.read(out / "manifest.json")
    m.config, m.seed, m.run_id = run.config, run.seed, run.run_id
    m.checkpoint = str(final)
    m.metrics_summary["initial_checkpoint"] = args.checkpoint
    m.write(out / "manifest.json")
    print(final)
    return 0


def _load_gmm(args, cfg, resolution):
    from .ingest import load_labeled
    from .synthesis import GmmInitializer, fit_gmm

    if args.gmm:
        return GmmInitializer.load(args.gmm)
    if cfg.data.gmm_manifest:
        lo = cfg.gmm.low_resolution
        images, labels = load_labeled(cfg.data.gmm_manifest, (lo, lo))
        return fit_gmm(images, labels, cfg.gmm.covariance_mode, cfg.gmm.shrinkage)
    raise ConfigError("generate needs --gmm or data.gmm_manifest")


def cmd_generate(args) -> int:
    from .synthesis import generate
    from .synthesis.generate import write_trajectory

    cfg = resolve_config(args)
    model = _load_model(args.checkpoint)
    gmm = _load_gmm(args, cfg, model.resolution)
    if args.prompts_file:
        prompts = [p.strip() for p in Path(args.prompts_file).read_text().splitlines() if p.strip()]
    elif args.prompt:
        prompts = [args.prompt]
    else:
        raise ConfigError("generate needs --prompt or --prompts-file")
    run = _new_manifest(args, cfg, {"prompts": prompts})
    out = _out_dir(args, run)
    finals = []
    for i, prompt in enumerate(prompts):
        sub = out if len(prompts) == 1 else out / f"prompt_{i:04d}"
        traj = generate(prompt, model, gmm, cfg.synthesis)
        traj.manifest.config = {**run.config, "prompt": prompt}
        traj.manifest.checkpoint = args.checkpoint
        traj.manifest.seed = cfg.synthesis.seed
        write_trajectory(traj, sub)
        finals.append(str(sub / "final.png"))
    if len(prompts) > 1:
        run.artifact_paths = finals
        run.write(out / "manifest.json")
    print("\n".join(finals))
    return 0


def cmd_attack(args) -> int:
    cfg = resolve_config(args)
    model = _load_model(args.checkpoint)
    image = load_png(args.image, model.resolution)
    tokens = tokenize([args.text], model.config.context_length)
    tm = cfg.train.threat
    g = torch.Generator().manual_seed(_seed(args, cfg))
    res = pgd_attack(model, image, tokens, tm, generator=g)
    run = _new_manifest(args, cfg, {"image": args.image, "text": args.text, "threat": tm.to_dict()})
    out = _out_dir(args, run)
    with torch.no_grad():
        clean = float((encode_image(model, image) * encode_text(model, tokens)).sum())
    run.add_artifact(save_png(res.adversarial, out / "adversarial.png"))
    np.save(out / "delta.npy", res.delta[0].cpu().numpy())
    run.add_artifact(out / "delta.npy")
    run.metrics_summary = {
        "clean_similarity": clean,
        "adversarial_similarity": float(res.final_similarity[0]),
        "loss_trace": res.loss_trace,
    }
    run.add_artifact(out / "manifest.json")
    run.write(out / "manifest.json")
    print(json.dumps(run.metrics_summary))
    return 0


def cmd_evaluate(args) -> int:
    from .evalkit import LinearProbeScorer, ScorerModel, evaluate_images, write_report

    cfg = resolve_config(args)
    if not args.scorer_checkpoint:
        raise CheckpointError("--scorer-checkpoint is required")
    scorer = ScorerModel(_load_model(args.scorer_checkpoint), tag=Path(args.scorer_checkpoint).stem)
    paths = sorted(p for p in Path(args.images_dir).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    prompts = [p.strip() for p in Path(args.prompts_file).read_text().splitlines() if p.strip()]
    if len(paths) != len(prompts):
        raise ConfigError(f"{len(paths)} images but {len(prompts)} prompts; they pair by sorted filename")
    res = scorer.encoder.resolution
    images = torch.cat([load_png(p, res) for p in paths])
    probe = LinearProbeScorer.load(args.probe) if args.probe else None
    records, summary = evaluate_images(images, prompts, scorer, probe)
    for r, p in zip(records, paths):
        r["image"] = str(p)
    run = _new_manifest(args, cfg, {"images_dir": args.images_dir, "prompts_file": args.prompts_file})
    run.checkpoint = args.scorer_checkpoint
    out = _out_dir(args, run)
    for p in write_report(records, summary, out):
        run.add_artifact(p)
    run.metrics_summary = summary
    run.add_artifact(out / "manifest.json")
    run.write(out / "manifest.json")
    print((out / "summary.txt").read_text(), end="")
    return 0


def cmd_explain(args) -> int:
    from .explain import explanation_under_attack

    cfg = resolve_config(args)
    model = _load_model(args.checkpoint)
    image = load_png(args.image, model.resolution)
    tm = cfg.explain
    if args.epsilon is not None or args.threat_norm is not None or args.steps is not None:
        tm = ThreatModel(
            norm=args.threat_norm or tm.norm,
            epsilon=tm.epsilon if args.epsilon is None else args.epsilon,
            steps=args.steps or tm.steps,
            step_size=tm.step_size,
        )
    clean, adv, shift = explanation_under_attack(model, image, args.text, tm, args.layer)
    run = _new_manifest(args, cfg, {"image": args.image, "text": args.text, "layer": clean.source_layer})
    out = _out_dir(args, run)
    for p in clean.save(out / "heatmap_clean.png", image) + adv.save(out / "heatmap_adv.png", image):
        run.add_artifact(p)
    run.metrics_summary = {"shift": shift, "layer": clean.source_layer}
    run.add_artifact(out / "manifest.json")
    run.write(out / "manifest.json")
    print(json.dumps(run.metrics_summary))
    return 0


def render_gradient(grad: torch.Tensor, path) -> Path:
    """Sign-symmetric diverging colormap, scaled per image by the max |value|."""
    from matplotlib import colormaps
    from PIL import Image

    g = grad.detach().reshape(3, *grad.shape[-2:]).sum(0).cpu().numpy()
    peak = np.abs(g).max()
    scaled = 0.5 + 0.5 * (g / peak if peak > 0 else g)
    rgb = colormaps["RdBu_r"](scaled)[..., :3]
    path = Path(path)
    Image.fromarray(np.round(rgb * 255).astype(np.uint8)).save(path)
    return path


def cmd_gradients(args) -> int:
    from .smoothing import smoothed_input_gradient

    cfg = resolve_config(args)
    model = _load_model(args.checkpoint)
    image = load_png(args.image, model.resolution)
    tokens = tokenize([args.text], model.config.context_length)
    if args.mode == "smoothed":
        grad = smoothed_input_gradient(model, image, tokens, cfg.smoothing)
    else:
        grad = image_input_gradient(model, image, tokens)
    run = _new_manifest(args, cfg, {"image": args.image, "text": args.text, "mode": args.mode})
    out = _out_dir(args, run)
    np.save(out / f"gradient_{args.mode}.npy", grad[0].cpu().numpy())
    run.add_artifact(out / f"gradient_{args.mode}.npy")
    run.add_artifact(render_gradient(grad, out / f"gradient_{args.mode}.png"))
    # the gradient added to the image, as a perceptual preview
    step = (image + 0.5 * grad / grad.abs().max().clamp_min(1e-12)).clamp(0, 1)
    run.add_artifact(save_png(step, out / f"gradient_{args.mode}_step.png"))
    run.metrics_summary = {"gradient_l2": float(grad.norm())}
    run.add_artifact(out / "manifest.json")
    run.write(out / "manifest.json")
    print(out)
    return 0


def cmd_fit_gmm(args) -> int:
    from .ingest import load_labeled
    from .synthesis import fit_gmm

    cfg = resolve_config(args)
    lo = cfg.gmm.low_resolution
    manifest = args.manifest or cfg.data.gmm_manifest
    if manifest is None:
        raise ConfigError("fit-gmm needs --manifest or data.gmm_manifest")
    images, labels = load_labeled(manifest, (lo, lo))
    gmm = fit_gmm(images, labels, cfg.gmm.covariance_mode, cfg.gmm.shrinkage)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    gmm.save(out)
    print(out)
    return 0


def cmd_toy_data(args) -> int:
    from .toydata import write_corpus

    print(write_corpus(args.out_dir or "toy_corpus", args.n, args.resolution, args.seed or 0, args.source))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--preset", default="desk", choices=sorted(cfgmod.PRESETS))
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir")
    common.add_argument("--checkpoint")
    common.add_argument("-v", "--verbose", action="store_true")

    threat = argparse.ArgumentParser(add_help=False)
    threat.add_argument("--threat-norm", choices=["L2", "Linf"])
    threat.add_argument("--epsilon", type=float)
    threat.add_argument("--steps", type=int, help="attack steps (synthesis steps for generate)")

    p = argparse.ArgumentParser(prog="clipag", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("finetune", parents=[common, threat], help="adversarially finetune the image tower")
    s.add_argument("--manifest")
    s.add_argument("--no-resume", action="store_true")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("generate", parents=[common, threat], help="synthesize images for prompts")
    s.add_argument("--prompt")
    s.add_argument("--prompts-file")
    s.add_argument("--prefix")
    s.add_argument("--gmm", help="fitted GMM (.npz)")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("attack", parents=[common, threat], help="PGD attack on one image-caption pair")
    s.add_argument("--image", required=True)
    s.add_argument("--text", required=True)
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("evaluate", parents=[common], help="score generated images with a held-out model")
    s.add_argument("--images-dir", required=True)
    s.add_argument("--prompts-file", required=True)
    s.add_argument("--scorer-checkpoint")
    s.add_argument("--probe", help="linear aesthetic probe (.npz)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("explain", parents=[common, threat], help="GradCAM before/after a negation attack")
    s.add_argument("--image", required=True)
    s.add_argument("--text", required=True)
    s.add_argument("--layer")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("gradients", parents=[common], help="visualize input gradients")
    s.add_argument("--image", required=True)
    s.add_argument("--text", required=True)
    s.add_argument("--mode", choices=["vanilla", "smoothed", "robust"], default="vanilla")
    s.set_defaults(func=cmd_gradients)

    s = sub.add_parser("fit-gmm", parents=[common], help="fit the per-class GMM initializer")
    s.add_argument("--manifest")
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_fit_gmm)

    s = sub.add_parser("toy-data", parents=[common], help="write a procedural caption corpus")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--resolution", type=int, default=32)
    s.add_argument("--source", default="toy")
    s.set_defaults(func=cmd_toy_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ClipagError as exc:
        msg = " ".join(str(exc).split())
        print(f"error: category={exc.category} {msg}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except FileNotFoundError as exc:
        print(f"error: category=io {' '.join(str(exc).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
