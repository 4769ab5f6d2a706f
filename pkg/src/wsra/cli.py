"""Command-line entry point: train, eval, ground, synth, ablate.

Every RunConfig field is also a kebab-case flag (``--learning-rate``);
flags override values read from ``--config`` (a key=value file).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

from .data import ManifestError, SyntheticSpec, load_manifest, write_synthetic
from .grounding import write_predictions
from .train import (
    RunConfig,
    TrainingDiverged,
    evaluate_manifest,
    ground_manifest,
    load_checkpoint,
    train,
    train_and_evaluate,
)

OUTPUT_ENV = "WSRA_OUTPUT_DIR"

# settings for the desk-scale synthetic task: lr 1e-4 barely moves the heads
# in 30 short epochs
SYNTHETIC_RUN = {"learning_rate": 1e-2, "epochs": 30}

LOSS_TERMS = ("video", "snippet", "batch")


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value run configuration file")
    g = p.add_argument_group("run configuration (overrides --config)")
    for f in fields(RunConfig):
        kind = {"int": int, "float": float}.get(f.type, str)
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None)


def _config_from(args) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    text = args.config.read_text() if args.config else ""
    return RunConfig.from_text(text, **overrides)


def _manifest(path, truth=None):
    return load_manifest(path, truth) if path else None


def cmd_train(args) -> int:
    config = _config_from(args)
    train_set = load_manifest(args.train).training_set()
    val = _manifest(args.val, args.val_truth)
    out = args.out or default_output_dir() / "train"
    res = train(config, train_set, out, val, resume=args.resume)
    print(f"epochs={res.final.epoch} best_epoch={res.final.best_epoch} best_val={res.final.best_score:.2f}")
    print(f"best checkpoint: {res.best_dir}")
    return 0


def _print_report(report, fmt: str) -> None:
    if fmt in ("keyvalue", "both"):
        sys.stdout.write(report.to_keyvalue())
    if fmt in ("table", "both"):
        sys.stdout.write(report.to_table())


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest, args.truth)
    report, _ = evaluate_manifest(ckpt.model, manifest, ckpt.config)
    _print_report(report, args.format)
    return 0


def cmd_ground(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    top_k = args.top_k or ckpt.config.effective_top_k()
    results = ground_manifest(ckpt.model, manifest, ckpt.config, args.query or None, top_k)
    out = args.output or default_output_dir() / "predictions.txt"
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    write_predictions(out, results)
    print(f"wrote {len(results)} predictions to {out}")
    return 0


def cmd_synth(args) -> int:
    text = args.spec.read_text() if args.spec else ""
    for k, v in (args.set or []):
        text += f"\n{k}={v}"
    spec = SyntheticSpec.from_text(text)
    out = Path(args.out or default_output_dir() / "synthetic")
    paths = write_synthetic(spec, out)
    (out / "run.cfg").write_text("".join(f"{k}={v}\n" for k, v in SYNTHETIC_RUN.items()))
    for name in ("train", "val", "test"):
        print(f"{name}: {paths[name]} (truth: {paths[name + '_truth']})")
    print(f"suggested run config: {out / 'run.cfg'}")
    return 0


def parse_grid(text: str) -> list[tuple[str, ...]]:
    """``"video;video+snippet"`` -> [("video",), ("video", "snippet")]."""
    rows = []
    for cell in text.split(";"):
        terms = tuple(t.strip() for t in cell.split("+") if t.strip())
        if not terms or any(t not in LOSS_TERMS for t in terms):
            raise ValueError(f"bad ablation cell {cell!r}; use terms from {LOSS_TERMS} joined by '+'")
        rows.append(terms)
    return rows


def ablation_config(base: RunConfig, terms: tuple[str, ...]) -> RunConfig:
    """Zero the weights of absent terms. Without the snippet term phi_snippet
    is never trained, so such rows ground with phi_video."""
    kw = {
        "alpha_w": base.alpha_w if "video" in terms else 0.0,
        "beta_w": base.beta_w if "snippet" in terms else 0.0,
        "delta_w": base.delta_w if "batch" in terms else 0.0,
    }
    if "snippet" not in terms and base.head == "snippet":
        kw["head"] = "video"
    return replace(base, **kw)


def run_ablation(base: RunConfig, cells: list[tuple[str, RunConfig]], train_m, val_m, test_m, out_dir: Path) -> list[tuple[str, object]]:
    rows = []
    for i, (label, cfg) in enumerate(cells):
        _, _, report = train_and_evaluate(cfg, train_m, out_dir / f"cell_{i:02d}", val_m, test_m)
        rows.append((label, report))
    return rows


def format_ablation(rows, threshold: float, label_width: int = 24) -> str:
    head = f"{'configuration':<{label_width}} {'R@1':>7} {'R@5':>7} {'mIoU':>7}"
    lines = [f"IoU={threshold:g}", head]
    for label, rep in rows:
        r1, r5 = rep.recall[threshold]
        lines.append(f"{label:<{label_width}} {r1:>7.2f} {r5:>7.2f} {rep.miou:>7.2f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    base = _config_from(args)
    train_m = load_manifest(args.train)
    val_m = _manifest(args.val, args.val_truth)
    test_m = _manifest(args.test, args.test_truth)
    if test_m is None and val_m is None:
        raise ValueError("ablate needs --test or --val with ground truth")
    cells = []
    if args.k_top_sweep:
        for k in args.k_top_sweep.split(","):
            cells.append((f"k_top={int(k)}", replace(base, k_top=int(k))))
    else:
        for terms in parse_grid(args.grid):
            cells.append(("+".join(terms), ablation_config(base, terms)))
    out = Path(args.out or default_output_dir() / "ablate")
    rows = run_ablation(base, cells, train_m, val_m, test_m, out)
    sys.stdout.write(format_ablation(rows, base.effective_select_iou()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wsra", description="Weakly supervised temporal grounding with referring attention.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train both scoring heads")
    p.add_argument("--train", required=True, type=Path, help="training manifest (spans are never read)")
    p.add_argument("--val", type=Path, help="validation manifest for checkpoint selection")
    p.add_argument("--val-truth", type=Path)
    p.add_argument("--out", type=Path, help=f"run directory (default ${OUTPUT_ENV}/train)")
    p.add_argument("--resume", type=Path, help="checkpoint directory to continue from")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="recall and mIoU of a checkpoint")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--truth", type=Path, help="truth file, if spans are not in the manifest")
    p.add_argument("--format", choices=("keyvalue", "table", "both"), default="both")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ground", help="write ranked predictions")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--query", action="append", help="query id (repeatable; default all)")
    p.add_argument("--output", type=Path)
    p.add_argument("--top-k", type=int, default=0)
    p.set_defaults(func=cmd_ground)

    p = sub.add_parser("synth", help="generate a planted-alignment dataset")
    p.add_argument("--spec", type=Path, help="key=value synthetic spec file")
    p.add_argument("--set", nargs=2, action="append", metavar=("KEY", "VALUE"), help="override one spec key")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablate", help="train a grid of configurations and tabulate")
    p.add_argument("--train", required=True, type=Path)
    p.add_argument("--val", type=Path)
    p.add_argument("--val-truth", type=Path)
    p.add_argument("--test", type=Path)
    p.add_argument("--test-truth", type=Path)
    p.add_argument("--grid", default="video;video+snippet;video+batch;video+snippet+batch")
    p.add_argument("--k-top-sweep", help="comma list of k_top values; replaces --grid")
    p.add_argument("--out", type=Path)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, ManifestError, TrainingDiverged) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"wsra: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
