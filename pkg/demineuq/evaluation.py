"""Scenario evaluation: clean, adversarial sweeps and noisy inputs.

Reports are assembled in ``source_id`` order and contain only values derived
from seeded computations, so two runs with the same seeds produce identical
reports apart from the ``generated_at`` stamp added when writing JSON.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy import stats

from .attacks import AdversarialResult, AttackConfig, run_attack
from .classifier import model_fingerprint
from .datasets import Dataset, ImageSample, NoiseSpec, add_noise
from .errors import (
    ConfigMismatchError,
    EmptyDatasetError,
    InvalidArgumentError,
    SampleEvaluationError,
    ScenarioMismatchError,
    UntrainedModelError,
)
from .mc_dropout import MCConfig, PredictionDistribution, mc_predict

logger = logging.getLogger(__name__)

SCENARIOS = ("clean", "fgsm_sweep", "pgd_sweep", "noisy")
TREND_COLUMNS = ("strength", "median_uncertainty", "mean_uncertainty", "accuracy")
REPORT_SCHEMA = 1


@dataclass
class SampleRecord:
    source_id: str
    label: int
    predicted_class: int
    uncertainty: float
    strength: float | None
    provenance: str
    linf: float | None = None

    @property
    def correct(self) -> bool:
        return self.predicted_class == self.label

    def to_dict(self) -> dict:
        return {
            "source_id": self.source_id,
            "label": self.label,
            "predicted_class": self.predicted_class,
            "uncertainty": self.uncertainty,
            "strength": self.strength,
            "provenance": self.provenance,
            "linf": self.linf,
        }


@dataclass(eq=False)
class ScenarioReport:
    scenario: str
    strength: float | None
    perturbation: dict | None
    mc: dict
    model_fingerprint: str
    records: list[SampleRecord]
    accuracy: float
    summary: dict
    flagged_fraction: list[dict]
    attack_results: list[AdversarialResult] = field(default_factory=list, repr=False)
    predictions: list[PredictionDistribution] = field(default_factory=list, repr=False)

    def uncertainties(self) -> np.ndarray:
        return np.array([r.uncertainty for r in self.records], dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA,
            "scenario": self.scenario,
            "strength": self.strength,
            "perturbation": self.perturbation,
            "mc": self.mc,
            "model_fingerprint": self.model_fingerprint,
            "sample_count": len(self.records),
            "accuracy": self.accuracy,
            "uncertainty": self.summary,
            "flagged_fraction": self.flagged_fraction,
            "records": [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioReport":
        return cls(
            scenario=data["scenario"],
            strength=data.get("strength"),
            perturbation=data.get("perturbation"),
            mc=data["mc"],
            model_fingerprint=data["model_fingerprint"],
            records=[SampleRecord(**r) for r in data["records"]],
            accuracy=data["accuracy"],
            summary=data["uncertainty"],
            flagged_fraction=data.get("flagged_fraction", []),
        )


@dataclass
class TrendResult:
    scenario: str
    strengths: list[float]
    medians: list[float]
    means: list[float]
    accuracies: list[float]
    spearman: float
    kendall: float
    monotone: bool

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "strengths": self.strengths,
            "median_uncertainty": self.medians,
            "mean_uncertainty": self.means,
            "accuracy": self.accuracies,
            "spearman": self.spearman,
            "kendall": self.kendall,
            "monotone": self.monotone,
        }


@dataclass
class FlaggingSummary:
    threshold: float
    true_flag_rate: float
    false_flag_rate: float
    mann_whitney_p: float
    attacked_scenario: str
    attacked_strength: float | None

    @property
    def margin(self) -> float:
        return self.true_flag_rate - self.false_flag_rate

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "true_flag_rate": self.true_flag_rate,
            "false_flag_rate": self.false_flag_rate,
            "margin": self.margin,
            "mann_whitney_p": self.mann_whitney_p,
            "attacked_scenario": self.attacked_scenario,
            "attacked_strength": self.attacked_strength,
        }


def summarize_uncertainty(values: np.ndarray) -> dict:
    q1, median, q3 = np.percentile(values, [25, 50, 75])
    return {
        "median": float(median),
        "mean": float(np.mean(values)),
        "q1": float(q1),
        "q3": float(q3),
        "iqr": float(q3 - q1),
        "min": float(np.min(values)),
        "max": float(np.max(values)),
    }


def flagged_fractions(values: np.ndarray, thresholds: Iterable[float]) -> list[dict]:
    out = []
    for t in sorted(set(float(t) for t in thresholds)):
        if t < 0:
            raise InvalidArgumentError(f"threshold must be >= 0, got {t}")
        out.append({"threshold": t, "fraction": float(np.mean(values > t))})
    return out


def scenario_of(perturbation: AttackConfig | NoiseSpec | None) -> tuple[str, float | None]:
    if perturbation is None:
        return "clean", None
    if isinstance(perturbation, AttackConfig):
        return f"{perturbation.kind}_sweep", perturbation.epsilon
    if isinstance(perturbation, NoiseSpec):
        return "noisy", perturbation.strength
    raise InvalidArgumentError(f"unsupported perturbation {type(perturbation).__name__}")


def evaluate_scenario(
    m: torch.nn.Module,
    samples: Dataset | Sequence[ImageSample],
    perturbation: AttackConfig | NoiseSpec | None = None,
    mc: MCConfig | None = None,
    thresholds: Iterable[float] = (),
) -> ScenarioReport:
    """Perturb each sample (if asked), run MC Dropout on it, aggregate."""
    mc = mc or MCConfig()
    if not getattr(m, "trained", False):
        raise UntrainedModelError("evaluate_scenario needs a trained model")
    ordered = sorted(samples, key=lambda s: s.source_id)
    if not ordered:
        raise EmptyDatasetError("no samples to evaluate")
    scenario, strength = scenario_of(perturbation)

    records, dists, attack_results = [], [], []
    for s in ordered:
        try:
            linf = None
            x = s
            if isinstance(perturbation, AttackConfig):
                res = run_attack(m, s, perturbation)
                attack_results.append(res)
                x, linf = res.x_adv, res.linf_distance
            elif isinstance(perturbation, NoiseSpec):
                x = add_noise(s, perturbation)
            dist = mc_predict(m, x, mc)
        except Exception as e:
            raise SampleEvaluationError(s.source_id, e) from e
        dists.append(dist)
        records.append(SampleRecord(
            source_id=s.source_id,
            label=s.label,
            predicted_class=dist.predicted_class,
            uncertainty=dist.uncertainty,
            strength=strength,
            provenance=x.provenance.value,
            linf=linf,
        ))

    values = np.array([r.uncertainty for r in records], dtype=np.float64)
    accuracy = sum(r.correct for r in records) / len(records)
    report = ScenarioReport(
        scenario=scenario,
        strength=strength,
        perturbation=perturbation.model_dump(mode="json") if perturbation is not None else None,
        mc=mc.model_dump(mode="json"),
        model_fingerprint=model_fingerprint(m),
        records=records,
        accuracy=accuracy,
        summary=summarize_uncertainty(values),
        flagged_fraction=flagged_fractions(values, thresholds),
        attack_results=attack_results,
        predictions=dists,
    )
    logger.info("scenario=%s strength=%s samples=%d accuracy=%.4f median_uncertainty=%.6g",
                scenario, strength, len(records), accuracy, report.summary["median"])
    return report


def _nan_to_zero(value: float) -> float:
    return 0.0 if value is None or math.isnan(value) else float(value)


def uncertainty_trend(reports: Sequence[ScenarioReport]) -> TrendResult:
    """Spearman (average ranks for ties, 0 when either side is constant)
    and Kendall tau between strength and median uncertainty.
    """
    if len(reports) < 2:
        raise InvalidArgumentError(f"a trend needs at least 2 reports, got {len(reports)}")
    kinds = {r.scenario for r in reports}
    if len(kinds) != 1:
        raise ScenarioMismatchError(f"reports mix scenarios {sorted(kinds)}")
    if any(r.strength is None for r in reports):
        raise InvalidArgumentError("every report in a trend needs a perturbation strength")
    ordered = sorted(reports, key=lambda r: r.strength)
    strengths = [float(r.strength) for r in ordered]
    medians = [float(r.summary["median"]) for r in ordered]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rho = stats.spearmanr(strengths, medians)[0]
        tau = stats.kendalltau(strengths, medians)[0]
    return TrendResult(
        scenario=ordered[0].scenario,
        strengths=strengths,
        medians=medians,
        means=[float(r.summary["mean"]) for r in ordered],
        accuracies=[float(r.accuracy) for r in ordered],
        spearman=_nan_to_zero(rho),
        kendall=_nan_to_zero(tau),
        monotone=all(b >= a for a, b in zip(medians, medians[1:])),
    )


def percentile_threshold(report: ScenarioReport, q: float = 95.0) -> float:
    if not 0.0 <= q <= 100.0:
        raise InvalidArgumentError(f"percentile must be in [0,100], got {q}")
    return float(np.percentile(report.uncertainties(), q))


def compare_flagging(clean: ScenarioReport, attacked: ScenarioReport, threshold: float) -> FlaggingSummary:
    if clean.mc != attacked.mc:
        raise ConfigMismatchError("clean and attacked reports used different MC configs")
    if clean.model_fingerprint != attacked.model_fingerprint:
        raise ConfigMismatchError("clean and attacked reports came from different models")
    if threshold < 0:
        raise InvalidArgumentError(f"threshold must be >= 0, got {threshold}")
    clean_u, attacked_u = clean.uncertainties(), attacked.uncertainties()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            p = float(stats.mannwhitneyu(attacked_u, clean_u, alternative="greater").pvalue)
    except ValueError:
        p = float("nan")
    return FlaggingSummary(
        threshold=float(threshold),
        true_flag_rate=float(np.mean(attacked_u > threshold)),
        false_flag_rate=float(np.mean(clean_u > threshold)),
        mann_whitney_p=1.0 if math.isnan(p) else p,
        attacked_scenario=attacked.scenario,
        attacked_strength=attacked.strength,
    )


def write_report_json(report: ScenarioReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["generated_at"] = datetime.now(timezone.utc).isoformat().replace("+00:00", "Z")
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def load_report_json(path: str | Path) -> ScenarioReport:
    return ScenarioReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_trend_csv(trend: TrendResult, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TREND_COLUMNS)
        for row in zip(trend.strengths, trend.medians, trend.means, trend.accuracies):
            writer.writerow(row)
    return path
