"""PNG charts for runs. Presentational only; nothing downstream reads them."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .classifier import TrainHistory  # noqa: E402
from .evaluation import ScenarioReport, TrendResult  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_trend(trends: Mapping[str, TrendResult], path: str | Path, clean_median: float | None = None) -> Path:
    """Median uncertainty against perturbation strength, one line per sweep."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, trend in sorted(trends.items()):
        ax.plot(trend.strengths, trend.medians, marker="o", label=f"{name} (rho={trend.spearman:.2f})")
    if clean_median is not None:
        ax.axhline(clean_median, color="grey", linestyle="--", label="clean median")
    ax.set_xlabel("perturbation strength")
    ax.set_ylabel("median uncertainty")
    ax.legend(loc="best", fontsize=8)
    return _save(fig, path)


def plot_uncertainty_bars(report: ScenarioReport, path: str | Path, limit: int = 12,
                          class_names: Sequence[str] | None = None) -> Path:
    records = report.records[:limit]
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(records)), 4))
    colors = ["tab:green" if r.correct else "tab:red" for r in records]
    ax.bar(range(len(records)), [r.uncertainty for r in records], color=colors)
    labels = [class_names[r.predicted_class] if class_names else str(r.predicted_class) for r in records]
    ax.set_xticks(range(len(records)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
    title = report.scenario if report.strength is None else f"{report.scenario} strength={report.strength:g}"
    ax.set_title(title)
    ax.set_ylabel("uncertainty")
    return _save(fig, path)


def plot_history(history: TrainHistory, path: str | Path) -> Path:
    epochs = list(range(1, history.epochs + 1))
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, history.train_loss, label="train")
    ax_loss.plot(epochs, history.val_loss, label="val")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_acc.plot(epochs, history.train_acc, label="train")
    ax_acc.plot(epochs, history.val_acc, label="val")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.legend()
    return _save(fig, path)
