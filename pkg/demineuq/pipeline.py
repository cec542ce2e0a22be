"""End-to-end experiment runs and parameter sweeps.

A run owns one directory ``<output_dir>/run-<UTC stamp>-<config hash>/`` that
is never reused. ``manifest.json`` is rewritten after every stage; it stays
``incomplete`` until the last stage finishes, so an interrupted run is
recognisable from its manifest alone.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import platform
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np
import scipy
import torch

from . import __version__
from .attacks import write_attack_artifacts
from .classifier import (
    HISTORY_COLUMNS,
    build_classifier,
    load_model,
    model_fingerprint,
    save_model,
    train,
    write_history_csv,
)
from .datasets import (
    Dataset,
    apply_noise,
    generate_synthetic_dataset,
    inspect_dataset,
    load_directory_dataset,
    split_dataset,
)
from .errors import ConfigMismatchError, DemineUQError, InvalidArgumentError
from .evaluation import (
    ScenarioReport,
    compare_flagging,
    evaluate_scenario,
    load_report_json,
    percentile_threshold,
    uncertainty_trend,
    write_report_json,
    write_trend_csv,
)
from .experiment import (
    DatasetSection,
    ExperimentConfig,
    check_axis,
    collect_seeds,
    config_hash,
    config_to_dict,
    dump_config,
    parse_config,
    with_value,
)
from .mc_dropout import write_prediction_records
from .plots import plot_history, plot_trend, plot_uncertainty_bars

logger = logging.getLogger(__name__)

ALL_STAGES = ("train", "clean", "attack", "noise")
EVAL_STAGES = ("clean", "attack", "noise")
MANIFEST_NAME = "manifest.json"
LATEST_NAME = "LATEST"
SWEEP_COLUMNS = ("axis_value",) + HISTORY_COLUMNS[1:]


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds").replace("+00:00", "Z")


def _versions() -> dict:
    return {
        "demineuq": __version__,
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "platform": platform.platform(),
    }


@dataclass
class RunManifest:
    run_id: str
    run_dir: str
    config: dict
    seeds: dict
    stages: list[str]
    started_at: str
    versions: dict = field(default_factory=_versions)
    status: str = "incomplete"
    artifacts: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    finished_at: str | None = None
    error: dict | None = None

    @property
    def path(self) -> Path:
        return Path(self.run_dir) / MANIFEST_NAME

    @property
    def complete(self) -> bool:
        return self.status == "complete"

    def artifact(self, name: str) -> Path:
        return Path(self.run_dir) / self.artifacts[name]

    def add_artifact(self, name: str, path: str | Path) -> Path:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"artifact {name} was not written: {path}")
        self.artifacts[name] = path.resolve().relative_to(Path(self.run_dir).resolve()).as_posix()
        return path

    def missing_artifacts(self) -> list[str]:
        return [name for name, rel in self.artifacts.items() if not (Path(self.run_dir) / rel).exists()]

    def write(self) -> Path:
        missing = self.missing_artifacts()
        if missing:
            raise FileNotFoundError(f"manifest lists missing artifacts: {missing}")
        tmp = self.path.with_name(MANIFEST_NAME + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")
        os.replace(tmp, self.path)
        return self.path

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunManifest":
        path = Path(run_dir) / MANIFEST_NAME
        if not path.is_file():
            raise FileNotFoundError(f"no {MANIFEST_NAME} in {run_dir}")
        data = json.loads(path.read_text(encoding="utf-8"))
        data["run_dir"] = str(Path(run_dir))
        return cls(**data)


@contextmanager
def _stage(manifest: RunManifest, name: str) -> Iterator[None]:
    extra = {"run_id": manifest.run_id, "stage": name}
    logger.info("stage=%s status=start", name, extra=extra)
    started = time.perf_counter()
    yield
    elapsed = time.perf_counter() - started
    manifest.timings[name] = round(elapsed, 3)
    logger.info("[timing] stage=%s seconds=%.2f", name, elapsed, extra=extra)
    manifest.write()


def create_run_dir(cfg: ExperimentConfig) -> Path:
    base = Path(cfg.output_dir)
    try:
        base.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InvalidArgumentError(f"output_dir {base} is not writable: {e}") from e
    stem = f"run-{datetime.now(timezone.utc):%Y%m%dT%H%M%SZ}-{config_hash(cfg)}"
    candidate, n = base / stem, 2
    while True:
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            candidate = base / f"{stem}-{n}"
            n += 1


def mark_latest(output_dir: str | Path, run_dir: Path) -> None:
    (Path(output_dir) / LATEST_NAME).write_text(run_dir.name + "\n", encoding="utf-8")


def resolve_run_dir(path: str | Path) -> Path:
    """A run directory, or an output directory holding a LATEST marker."""
    path = Path(path)
    if (path / MANIFEST_NAME).is_file():
        return path
    marker = path / LATEST_NAME
    if marker.is_file():
        return path / marker.read_text(encoding="utf-8").strip()
    raise FileNotFoundError(f"{path} is neither a run directory nor holds a {LATEST_NAME} marker")


def build_dataset(section: DatasetSection) -> Dataset:
    if section.source == "synthetic":
        return generate_synthetic_dataset(section.class_count, section.per_class, section.resolution,
                                          section.seed, section.class_names)
    return load_directory_dataset(section.root, section.names(), section.resolution)


def prepare_splits(section: DatasetSection) -> tuple[Dataset, Dataset, Dataset]:
    data = build_dataset(section)
    train_set, val_set, test_set = split_dataset(data, section.split)
    if section.train_noise is not None:
        train_set = apply_noise(train_set, section.train_noise, section.train_noise_fraction)
    return train_set, val_set, test_set


def _scenario_dir(report: ScenarioReport) -> str:
    if report.scenario == "clean":
        return "clean"
    if report.scenario == "noisy":
        return f"noisy/{report.perturbation['kind']}-{report.strength:g}"
    return f"{report.perturbation['kind']}/eps-{report.strength:g}"


def _trend_key(report: ScenarioReport) -> str:
    if report.scenario == "noisy":
        return f"noisy-{report.perturbation['kind']}"
    return report.perturbation["kind"]


def _trend_path(run_dir: Path, key: str) -> Path:
    if key.startswith("noisy-"):
        return run_dir / "noisy" / f"trend-{key[len('noisy-'):]}.csv"
    return run_dir / key / "trend.csv"


def _write_scenario(manifest: RunManifest, report: ScenarioReport, export_images: bool) -> None:
    rel = _scenario_dir(report)
    out = Path(manifest.run_dir) / rel
    manifest.add_artifact(f"{rel}/report", write_report_json(report, out / "report.json"))
    manifest.add_artifact(f"{rel}/predictions", write_prediction_records(report.predictions, out / "predictions.jsonl"))
    if report.attack_results:
        manifest.add_artifact(f"{rel}/attacks", write_attack_artifacts(report.attack_results, out, export_images))


def analyze_reports(manifest: RunManifest, cfg: ExperimentConfig, reports: Sequence[ScenarioReport]) -> dict:
    """Trends, flagging and plots over a run's scenario reports."""
    run_dir = Path(manifest.run_dir)
    clean = next((r for r in reports if r.scenario == "clean"), None)
    summary: dict[str, Any] = {"scenarios": {}}
    for r in reports:
        summary["scenarios"][_scenario_dir(r)] = {"accuracy": r.accuracy, "median_uncertainty": r.summary["median"],
                                                  "mean_uncertainty": r.summary["mean"]}

    groups: dict[str, list[ScenarioReport]] = defaultdict(list)
    for r in reports:
        if r.scenario != "clean":
            groups[_trend_key(r)].append(r)
    trends = {}
    for key, members in sorted(groups.items()):
        if len(members) < 2:
            continue
        trend = uncertainty_trend(members)
        trends[key] = trend
        path = _trend_path(run_dir, key)
        manifest.add_artifact(f"trend/{key}", write_trend_csv(trend, path))
    summary["trends"] = {k: {"spearman": t.spearman, "kendall": t.kendall, "monotone": t.monotone,
                             "medians": t.medians, "strengths": t.strengths} for k, t in trends.items()}

    plots = run_dir / "plots"
    if clean is not None:
        summary["clean_accuracy"] = clean.accuracy
        summary["clean_median_uncertainty"] = clean.summary["median"]
        threshold = percentile_threshold(clean, cfg.flag_percentile)
        comparisons = []
        for r in reports:
            if r.scenario == "clean":
                continue
            for t in (threshold, *cfg.thresholds):
                comparisons.append({"scenario_dir": _scenario_dir(r), **compare_flagging(clean, r, t).to_dict()})
        flagging = {"percentile": cfg.flag_percentile, "percentile_threshold": threshold, "comparisons": comparisons}
        path = run_dir / "flagging.json"
        path.write_text(json.dumps(flagging, indent=2) + "\n", encoding="utf-8")
        manifest.add_artifact("flagging", path)
        summary["flagging"] = [c for c in comparisons if c["threshold"] == threshold]
        names = cfg.dataset.names()
        for r in reports:
            name = _scenario_dir(r).replace("/", "_")
            manifest.add_artifact(f"plots/{name}", plot_uncertainty_bars(r, plots / f"{name}.png", class_names=names))
    if trends:
        clean_median = clean.summary["median"] if clean is not None else None
        manifest.add_artifact("plots/trend", plot_trend(trends, plots / "trend.png", clean_median))
    return summary


def _check_arch(model, cfg: ExperimentConfig) -> None:
    if model.arch != cfg.arch:
        raise ConfigMismatchError(f"checkpoint arch {model.arch.model_dump()} differs from config arch "
                                  f"{cfg.arch.model_dump()}")


def run_experiment(cfg: ExperimentConfig, stages: Sequence[str] = ALL_STAGES,
                   model_path: str | Path | None = None) -> RunManifest:
    """generate/load -> split -> train -> clean -> attacks -> noise -> trends."""
    unknown = set(stages) - set(ALL_STAGES)
    if unknown:
        raise InvalidArgumentError(f"unknown stages {sorted(unknown)}; expected a subset of {ALL_STAGES}")
    stages = [s for s in ALL_STAGES if s in stages]
    if "train" not in stages and model_path is None:
        raise InvalidArgumentError("a model checkpoint is required when the train stage is skipped")

    run_dir = create_run_dir(cfg)
    manifest = RunManifest(
        run_id=run_dir.name,
        run_dir=str(run_dir),
        config=config_to_dict(cfg),
        seeds=collect_seeds(cfg),
        stages=list(stages),
        started_at=_utc_now(),
    )
    config_path = run_dir / "config.yaml"
    config_path.write_text(dump_config(cfg), encoding="utf-8")
    manifest.add_artifact("config", config_path)
    manifest.write()
    mark_latest(cfg.output_dir, run_dir)
    logger.info("run started run_dir=%s stages=%s", run_dir, ",".join(stages), extra={"run_id": manifest.run_id})
    torch.use_deterministic_algorithms(True, warn_only=True)

    try:
        with _stage(manifest, "dataset"):
            train_set, val_set, test_set = prepare_splits(cfg.dataset)
            manifest.summary["dataset"] = {
                "train": len(train_set), "val": len(val_set), "test": len(test_set),
                "per_class_train": inspect_dataset(train_set)["per_class"],
            }

        if "train" in stages:
            with _stage(manifest, "train"):
                model = build_classifier(cfg.arch, seed=cfg.train.seed)
                model, history = train(model, train_set, val_set, cfg.train)
                manifest.add_artifact("model", save_model(model, run_dir / "model.pt"))
                manifest.add_artifact("history", write_history_csv(history, run_dir / "history.csv"))
                manifest.add_artifact("plots/history", plot_history(history, run_dir / "plots" / "history.png"))
                manifest.summary["history"] = history.final()
                manifest.summary["initial_train_loss"] = history.initial_train_loss
                manifest.summary["backbone"] = model.arch.backbone
        else:
            model = load_model(model_path)
            _check_arch(model, cfg)
            manifest.summary["model_path"] = str(model_path)
        manifest.summary["model_fingerprint"] = model_fingerprint(model)

        reports: list[ScenarioReport] = []
        if any(s in stages for s in EVAL_STAGES):
            with _stage(manifest, "clean"):
                reports.append(evaluate_scenario(model, test_set, None, cfg.mc, cfg.thresholds))
                _write_scenario(manifest, reports[-1], cfg.export_attack_images)
        if "attack" in stages:
            for attack in cfg.attacks:
                with _stage(manifest, attack.label()):
                    reports.append(evaluate_scenario(model, test_set, attack, cfg.mc, cfg.thresholds))
                    _write_scenario(manifest, reports[-1], cfg.export_attack_images)
        if "noise" in stages:
            for spec in cfg.noise:
                with _stage(manifest, f"noise-{spec.kind}-{spec.strength:g}"):
                    reports.append(evaluate_scenario(model, test_set, spec, cfg.mc, cfg.thresholds))
                    _write_scenario(manifest, reports[-1], cfg.export_attack_images)
        if reports:
            with _stage(manifest, "analysis"):
                manifest.summary.update(analyze_reports(manifest, cfg, reports))
        manifest.status = "complete"
    except Exception as e:
        manifest.error = e.to_dict() if isinstance(e, DemineUQError) else {"error": str(e), "reason": type(e).__name__}
        logger.error("run failed run_dir=%s reason=%s", run_dir, manifest.error["reason"],
                     extra={"run_id": manifest.run_id})
        raise
    finally:
        manifest.finished_at = _utc_now()
        manifest.write()
    logger.info("run complete run_dir=%s", run_dir, extra={"run_id": manifest.run_id})
    return manifest


def rebuild_report(run_dir: str | Path) -> RunManifest:
    """Recompute trends, flagging and plots from a run's saved reports."""
    manifest = RunManifest.load(resolve_run_dir(run_dir))
    cfg = parse_config(manifest.config)
    names = sorted(k for k in manifest.artifacts if k.endswith("/report"))
    if not names:
        raise InvalidArgumentError(f"{manifest.run_dir} holds no scenario reports")
    reports = [load_report_json(manifest.artifact(k)) for k in names]
    reports.sort(key=lambda r: (r.scenario != "clean", r.scenario, r.strength or 0.0))
    manifest.summary.update(analyze_reports(manifest, cfg, reports))
    manifest.write()
    return manifest


def _axis_label(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return json.dumps(list(value))
    return "" if value is None else str(value)


def run_sweep(base: ExperimentConfig, axis: str, values: Sequence[Any], train_only: bool = False) -> list[RunManifest]:
    """One run per value of ``axis`` plus ``sweep_summary.csv`` of final epoch metrics."""
    if not values:
        raise InvalidArgumentError("a sweep needs at least one value")
    check_axis(base, axis)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    sweep_dir = Path(base.output_dir) / f"sweep-{axis.replace('.', '_')}-{stamp}-{config_hash(base)}"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    stages = ("train",) if train_only else ALL_STAGES

    manifests, rows = [], []
    for value in values:
        cfg = with_value(base, axis, value, output_dir=str(sweep_dir))
        logger.info("sweep axis=%s value=%s", axis, _axis_label(value))
        manifest = run_experiment(cfg, stages=stages)
        manifests.append(manifest)
        final = manifest.summary.get("history", {})
        rows.append({"axis_value": _axis_label(value), **{k: final.get(k) for k in SWEEP_COLUMNS[1:]}})

    path = sweep_dir / "sweep_summary.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    logger.info("sweep complete axis=%s runs=%d summary=%s", axis, len(manifests), path)
    return manifests

