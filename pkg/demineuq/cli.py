"""Command-line entry point: ``python -m demineuq <command> ...``.

Every command accepts ``--config``, ``--set KEY=VALUE`` (repeatable),
``--seed`` and ``--output``. Run-producing commands exit 0 only when the run
manifest ends up complete; library errors exit 2 with a one-line reason.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

import yaml

from .datasets import export_dataset, inspect_dataset, load_directory_dataset
from .errors import DemineUQError
from .experiment import ExperimentConfig, config_hash, load_config
from .logs import configure_logging
from .pipeline import RunManifest, build_dataset, rebuild_report, run_experiment, run_sweep


EVAL_STAGES = {"clean": ("clean",), "attack": ("clean", "attack"), "noise": ("clean", "noise")}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=None, help="experiment YAML (defaults apply when omitted)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field, e.g. arch.drop_rate=0.2 (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="master seed; rewrites every seed in the config")
    p.add_argument("--output", default=None, help="output directory (default: UQ_OUTPUT_DIR or ./runs)")
    p.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING ...")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="demineuq", description="MC Dropout uncertainty under adversarial "
                                                                  "and noisy inputs")
    sub = parser.add_subparsers(dest="command", required=True)

    dataset = sub.add_parser("dataset", help="generate or inspect datasets")
    dataset_sub = dataset.add_subparsers(dest="action", required=True)
    gen = dataset_sub.add_parser("generate", parents=[common], help="render the configured dataset to PNGs")
    gen.add_argument("--out", type=Path, default=None, help="target directory (default: <output>/dataset-<hash>)")
    insp = dataset_sub.add_parser("inspect", parents=[common], help="per-class counts and fractions")
    insp.add_argument("path", nargs="?", type=Path, default=None,
                      help="directory dataset to inspect (default: the configured dataset)")

    sub.add_parser("train", parents=[common], help="train and save a model (no evaluation)")

    ev = sub.add_parser("eval", parents=[common], help="evaluate a saved model")
    ev.add_argument("scenario", choices=sorted(EVAL_STAGES))
    ev.add_argument("--model", type=Path, required=True, help="checkpoint written by train/run")

    sweep = sub.add_parser("sweep", parents=[common], help="one run per value of a config field")
    sweep.add_argument("--axis", required=True, help="dotted field, e.g. arch.drop_rate")
    sweep.add_argument("--values", nargs="+", required=True, help="YAML scalars, e.g. 0.0 0.1 '[3,4]'")
    sweep.add_argument("--train-only", action="store_true", help="skip evaluation stages")

    report = sub.add_parser("report", help="recompute trends, flagging and plots for a run")
    report.add_argument("run_dir", type=Path, help="run directory, or an output directory with LATEST")
    report.add_argument("--log-level", default=None)

    sub.add_parser("run", parents=[common], help="full experiment: train, clean, attacks, noise, trends")
    return parser


def _load(args: argparse.Namespace) -> ExperimentConfig:
    return load_config(args.config, args.overrides, seed=args.seed, output_dir=args.output)


def _finish(manifest: RunManifest) -> int:
    print(f"[run] dir={manifest.run_dir} status={manifest.status}")
    for key in ("clean_accuracy", "clean_median_uncertainty"):
        if key in manifest.summary:
            print(f"[run] {key}={manifest.summary[key]:.6g}")
    return 0 if manifest.complete else 1


def _cmd_dataset(args: argparse.Namespace) -> int:
    cfg = _load(args)
    if args.action == "generate":
        data = build_dataset(cfg.dataset)
        out = args.out or Path(cfg.output_dir) / f"dataset-{config_hash(cfg)}"
        manifest = export_dataset(data, out)
        print(f"[dataset] samples={len(data)} root={out} manifest={manifest}")
        return 0
    if args.path is not None:
        data = load_directory_dataset(args.path, cfg.dataset.names(), cfg.dataset.resolution)
    else:
        data = build_dataset(cfg.dataset)
    info = inspect_dataset(data)
    info["skipped"] = len(data.metadata.get("skipped", []))
    print(json.dumps(info, indent=2))
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load(args)
    values = [yaml.safe_load(v) for v in args.values]
    manifests = run_sweep(cfg, args.axis, values, train_only=args.train_only)
    for m in manifests:
        final = m.summary.get("history", {})
        print(f"[sweep] run={m.run_id} status={m.status} val_acc={final.get('val_acc')}")
    return 0 if all(m.complete for m in manifests) else 1


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        if args.command == "dataset":
            return _cmd_dataset(args)
        if args.command == "train":
            return _finish(run_experiment(_load(args), stages=("train",)))
        if args.command == "eval":
            return _finish(run_experiment(_load(args), stages=EVAL_STAGES[args.scenario], model_path=args.model))
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "report":
            manifest = rebuild_report(args.run_dir)
            print(f"[report] dir={manifest.run_dir} trends={sorted(manifest.summary.get('trends', {}))}")
            return 0
        return _finish(run_experiment(_load(args)))
    except DemineUQError as e:
        print(f"error: {e} (reason={e.reason})", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e} (reason=not_found)", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
