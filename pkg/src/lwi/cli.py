"""Command-line front end: ``lwi run | fuse | eval | activations | inspect``.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from importlib import metadata
from pathlib import Path

from .align import FusionConfig, LayerPolicy, align_and_fuse
from .checkpoint import dump_text, load_checkpoint, save_checkpoint
from .config import build_stream, load_config, run_config
from .continual import (
    activation_levels,
    eval_task_agnostic,
    eval_task_aware,
    pairwise_overlaps,
    run_lwi,
    write_activations,
    write_metrics,
    write_overlaps,
)
from .errors import ConfigError, FormatError, InvalidInputError
from .matching import MatchConfig

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _load_ckpt(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.output_dir:
        cfg["output_dir"] = args.output_dir
    out = Path(cfg["output_dir"])
    stream = build_stream(cfg)
    run = run_config(cfg)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    def on_step(step, model):
        save_checkpoint(model, ckpt_dir / f"step_{step + 1}.lwi")

    _, log = run_lwi(stream, run, on_step=on_step)
    write_metrics(log, out, top_k=cfg["top_k"])
    manifest = {"version": _version(), "seed": cfg["seed"], "config": cfg}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"strategy {cfg['strategy']}, {len(stream)} tasks")
    for s in range(log.n_steps):
        row = " ".join(f"{a:6.2f}" for a in log.acc_matrix[s, :s + 1])
        print(f"step {s + 1}: aware [{row}]  agnostic {log.agnostic_acc[s]:6.2f}")
    if log.forgetting:
        print(f"final average forgetting {log.forgetting[-1]:.4f}")
    print(f"outputs written to {out}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    old = _load_ckpt(args.old)
    new = _load_ckpt(args.new)
    n_layers = len(old.feature_layers)
    if args.n_deep > n_layers:
        raise UsageError(f"--n-deep {args.n_deep} exceeds {n_layers} feature layers")
    k = args.k if args.k == "equal_weight" else float(args.k)
    cfg = FusionConfig(
        k=k,
        policy=LayerPolicy(n_deep=args.n_deep, metric=args.metric, mode=args.mode),
        match=MatchConfig(tau=args.tau, tau_min=args.tau_min),
        old_heads=args.old_heads,
    )
    fused, reports = align_and_fuse(old, new, cfg, return_report=True)
    for r in reports:
        branch = "deep (negated)" if r.deep else "shallow"
        conv = "" if r.mode == "hard" else f"  converged={'yes' if r.converged else 'no'}"
        print(f"layer {r.layer}: {branch:15s} {r.mode}  score={r.score:.6f}{conv}")
    save_checkpoint(fused, args.out)
    print(f"fused checkpoint written to {args.out}")
    return EXIT_OK


def _stream_from(args):
    cfg = load_config(args.data_config)
    return build_stream(cfg)


def cmd_eval(args) -> int:
    model = _load_ckpt(args.checkpoint)
    stream = _stream_from(args)
    show_aware = args.task_aware or not args.task_agnostic
    show_agnostic = args.task_agnostic or not args.task_aware
    rows = []
    if show_aware:
        for t, acc in enumerate(eval_task_aware(model, stream)):
            print(f"task-aware task {t + 1}: {acc:.6f}")
            rows.append(("task_aware", t + 1, acc))
    if show_agnostic:
        acc = eval_task_agnostic(model, stream)
        print(f"task-agnostic: {acc:.6f}")
        rows.append(("task_agnostic", "all", acc))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "task", "accuracy"])
            for metric, task, acc in rows:
                w.writerow([metric, task, f"{acc:.6f}"])
    return EXIT_OK


def cmd_activations(args) -> int:
    if args.top_k < 1:
        raise UsageError("--top-k must be >= 1")
    model = _load_ckpt(args.checkpoint)
    stream = _stream_from(args)
    if len(model.heads) < len(stream):
        raise UsageError(f"checkpoint has {len(model.heads)} heads for {len(stream)} tasks")
    if args.top_k > model.feature_width:
        raise UsageError(f"--top-k {args.top_k} exceeds feature width {model.feature_width}")
    levels = [activation_levels(model, task.test) for task in stream]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_activations(levels, out / "activations.csv")
    overlaps = pairwise_overlaps(levels, args.top_k)
    write_overlaps(overlaps, out / "overlap.csv")
    print("task_a task_b jaccard")
    for i, j, v in overlaps:
        print(f"{i + 1:6d} {j + 1:6d} {v:.6f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    print(dump_text(_load_ckpt(args.checkpoint)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lwi", description="Pathway-aware model fusion for continual learning.")
    p.add_argument("--version", action="version", version=_version())
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a continual-learning experiment from a config file")
    r.add_argument("config")
    r.add_argument("--output-dir", help="override output_dir from the config")
    r.set_defaults(func=cmd_run)

    f = sub.add_parser("fuse", help="align and fuse two checkpoints")
    f.add_argument("old")
    f.add_argument("new")
    f.add_argument("--out", required=True)
    f.add_argument("--k", default="0.5", help="fusion coefficient in [0, 1] or 'equal_weight'")
    f.add_argument("--n-deep", type=int, default=1)
    f.add_argument("--metric", choices=["euclidean", "cosine"], default="euclidean")
    f.add_argument("--mode", choices=["soft", "hard"], default="soft")
    f.add_argument("--tau", type=float, default=MatchConfig.tau)
    f.add_argument("--tau-min", type=float, default=MatchConfig.tau_min)
    f.add_argument("--old-heads", choices=["fuse", "carry"], default="fuse")
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a config's task stream")
    e.add_argument("checkpoint")
    e.add_argument("data_config")
    e.add_argument("--task-aware", action="store_true")
    e.add_argument("--task-agnostic", action="store_true")
    e.add_argument("--out", help="CSV file for the accuracies")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("activations", help="activation levels and pathway overlap per task")
    a.add_argument("checkpoint")
    a.add_argument("data_config")
    a.add_argument("--top-k", type=int, default=10)
    a.add_argument("--out-dir", default=".")
    a.set_defaults(func=cmd_activations)

    i = sub.add_parser("inspect", help="print a checkpoint as JSON")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "fuse" and args.k != "equal_weight":
            try:
                float(args.k)
            except ValueError:
                raise UsageError(f"--k must be a number or 'equal_weight', got {args.k!r}") from None
        return args.func(args)
    except (UsageError, ConfigError, InvalidInputError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
