"""Monte Carlo Dropout inference.

``mc_predict`` runs N stochastic passes with the dropout layer enabled. Pass
``i`` draws its mask from a generator seeded with ``seed ^ i``, so changing N
never changes the first min(N, N') passes and the result does not depend on
the order in which passes run. The prediction is the mean over passes and the
epistemic uncertainty is the per-class population variance (1/N divisor),
reduced to a scalar by the configured aggregation.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import entr

from .classifier import as_batch, check_input, model_device, model_dtype
from .datasets import Dataset, ImageSample
from .errors import IncompatibleAggregationError, InvalidArgumentError, ShapeMismatchError, UntrainedModelError

logger = logging.getLogger(__name__)

Aggregation = Literal["sum_variance_logits", "sum_variance_softmax", "predictive_entropy"]
ScoreSpace = Literal["logits", "softmax"]

REQUIRED_SPACE: dict[str, str] = {
    "sum_variance_logits": "logits",
    "sum_variance_softmax": "softmax",
    "predictive_entropy": "softmax",
}


class MCConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    passes: int = Field(100, ge=1)
    seed: int = Field(0, ge=0)
    aggregation: Aggregation = "sum_variance_logits"
    score_space: ScoreSpace = "logits"

    @model_validator(mode="before")
    @classmethod
    def _default_space(cls, data):
        if isinstance(data, dict) and data.get("score_space") is None:
            data = {**data, "score_space": REQUIRED_SPACE.get(data.get("aggregation", "sum_variance_logits"), "logits")}
        return data

    @model_validator(mode="after")
    def _compatible(self) -> "MCConfig":
        if REQUIRED_SPACE[self.aggregation] != self.score_space:
            raise ValueError(f"aggregation {self.aggregation} needs score_space "
                             f"{REQUIRED_SPACE[self.aggregation]}, got {self.score_space}")
        return self


@dataclass(eq=False)
class PredictionDistribution:
    per_pass_scores: np.ndarray
    mean: np.ndarray
    per_class_variance: np.ndarray
    uncertainty: float
    predicted_class: int
    score_space: str
    aggregation: str
    passes: int
    seed: int
    source_id: str | None = None
    mutual_information: float | None = field(default=None)

    def to_record(self) -> dict:
        record = {
            "source_id": self.source_id,
            "predicted_class": self.predicted_class,
            "mean_scores": [float(v) for v in self.mean],
            "per_class_variance": [float(v) for v in self.per_class_variance],
            "uncertainty": float(self.uncertainty),
            "passes": self.passes,
            "aggregation": self.aggregation,
            "seed": self.seed,
            "score_space": self.score_space,
        }
        if self.mutual_information is not None:
            record["mutual_information"] = float(self.mutual_information)
        return record


def pass_generator(seed: int, index: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed ^ index)


def uncertainty_scalar(d: PredictionDistribution, aggregation: str | None = None) -> float:
    """Sum of per-class variances, or the entropy of the softmax mean."""
    aggregation = aggregation or d.aggregation
    if aggregation not in REQUIRED_SPACE:
        raise InvalidArgumentError(f"unknown aggregation {aggregation!r}")
    if REQUIRED_SPACE[aggregation] != d.score_space:
        raise IncompatibleAggregationError(
            f"{aggregation} needs {REQUIRED_SPACE[aggregation]} scores, distribution holds {d.score_space}"
        )
    if aggregation == "predictive_entropy":
        return float(entr(np.asarray(d.mean, dtype=np.float64)).sum())
    return float(np.sum(d.per_class_variance))


def summarize_passes(scores: np.ndarray, cfg: MCConfig, source_id: str | None = None) -> PredictionDistribution:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 1:
        raise ShapeMismatchError(f"per-pass scores must be N×C, got {scores.shape}")
    # shifted by the first pass: identical passes give exactly zero variance
    shift = scores[0]
    dev = scores - shift
    mean_dev = dev.mean(axis=0)
    variance = ((dev - mean_dev) ** 2).mean(axis=0)
    mean = shift + mean_dev
    dist = PredictionDistribution(
        per_pass_scores=scores,
        mean=mean,
        per_class_variance=variance,
        uncertainty=0.0,
        predicted_class=int(np.argmax(mean)),
        score_space=cfg.score_space,
        aggregation=cfg.aggregation,
        passes=scores.shape[0],
        seed=cfg.seed,
        source_id=source_id,
    )
    dist.uncertainty = uncertainty_scalar(dist)
    if cfg.score_space == "softmax":
        dist.mutual_information = max(0.0, float(entr(mean).sum() - entr(scores).sum(axis=1).mean()))
    return dist


def mc_predict(m: torch.nn.Module, x: ImageSample | torch.Tensor, cfg: MCConfig,
               source_id: str | None = None) -> PredictionDistribution:
    if not getattr(m, "trained", False):
        raise UntrainedModelError("mc_predict needs a trained model")
    if isinstance(x, ImageSample):
        source_id = source_id or x.source_id
        x = x.tensor()
    batch = as_batch(x)
    if batch.shape[0] != 1:
        raise ShapeMismatchError(f"mc_predict takes one image, got a batch of {batch.shape[0]}")
    check_input(m, batch)

    was_training = m.training
    m.eval()
    try:
        with torch.no_grad():
            feats = m.features(batch.to(device=model_device(m), dtype=model_dtype(m)))
            rows = [m.head(feats, dropout_enabled=True, generator=pass_generator(cfg.seed, i))[0]
                    for i in range(cfg.passes)]
    finally:
        m.train(was_training)
    scores = torch.stack(rows).to(device="cpu", dtype=torch.float64)
    if cfg.score_space == "softmax":
        scores = torch.softmax(scores, dim=1)
    return summarize_passes(scores.numpy(), cfg, source_id)


def mc_predict_dataset(m: torch.nn.Module, d: Dataset | Iterable[ImageSample],
                       cfg: MCConfig) -> list[PredictionDistribution]:
    samples = sorted(d, key=lambda s: s.source_id)
    return [mc_predict(m, s, cfg) for s in samples]


def flag_unreliable(d: PredictionDistribution | float, threshold: float) -> bool:
    """True iff uncertainty is strictly above the threshold."""
    if threshold < 0:
        raise InvalidArgumentError(f"threshold must be >= 0, got {threshold}")
    value = d.uncertainty if isinstance(d, PredictionDistribution) else float(d)
    return value > threshold


def write_prediction_records(dists: Sequence[PredictionDistribution], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for d in dists:
            fh.write(json.dumps(d.to_record(), ensure_ascii=False) + "\n")
    return path
