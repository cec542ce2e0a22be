"""L∞ adversarial attacks (FGSM and PGD) against the deterministic classifier.

Both attacks share one update, ``project(clip(x_t + step * sign(g)))``, so a
single-step PGD with ``alpha == epsilon`` and no random start reproduces FGSM
exactly. Gradients come from the model with dropout disabled; attack
arithmetic runs in float64.
"""
from __future__ import annotations

import csv
import logging
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .classifier import as_batch, check_input, model_device, model_dtype
from .datasets import Dataset, ImageSample, Provenance, safe_filename, to_uint8_image
from .errors import InvalidArgumentError, ShapeMismatchError, UntrainedModelError

logger = logging.getLogger(__name__)

ATTACK_COLUMNS = ("source_id", "kind", "epsilon", "alpha", "iters", "linf", "orig_class", "adv_class", "success")

LossFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


class AttackConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["fgsm", "pgd"]
    epsilon: float = Field(..., ge=0.0, lt=1.0)
    alpha: float | None = Field(None, gt=0.0)
    iters: int = Field(10, ge=1)
    random_start: bool = True
    seed: int = Field(0, ge=0)
    loss: Literal["cross_entropy", "margin"] = "cross_entropy"

    @model_validator(mode="before")
    @classmethod
    def _default_alpha(cls, data):
        if isinstance(data, dict) and data.get("kind") == "pgd" and data.get("alpha") is None \
                and data.get("epsilon") is not None:
            data = {**data, "alpha": float(data["epsilon"]) / 4}
        return data

    @model_validator(mode="after")
    def _pgd_budget(self) -> "AttackConfig":
        if self.kind == "pgd":
            if self.epsilon <= 0:
                raise ValueError("pgd needs epsilon > 0")
            if self.alpha is None or self.alpha > self.epsilon:
                raise ValueError(f"pgd needs 0 < alpha <= epsilon, got alpha={self.alpha} epsilon={self.epsilon}")
        return self

    @property
    def step(self) -> float:
        return self.alpha if self.kind == "pgd" else self.epsilon

    @property
    def step_count(self) -> int:
        return self.iters if self.kind == "pgd" else 1

    def label(self) -> str:
        return f"{self.kind}-eps{self.epsilon:g}"


@dataclass(eq=False)
class AdversarialResult:
    x_adv: ImageSample
    linf_distance: float
    original_prediction: int
    adversarial_prediction: int
    success: bool
    kind: str
    epsilon: float
    alpha: float
    iters: int

    def to_row(self) -> dict:
        return {
            "source_id": self.x_adv.source_id,
            "kind": self.kind,
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "iters": self.iters,
            "linf": self.linf_distance,
            "orig_class": self.original_prediction,
            "adv_class": self.adversarial_prediction,
            "success": self.success,
        }


def cross_entropy_loss(scores: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(scores, y, reduction="sum")


def margin_loss(scores: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Best wrong-class score minus true-class score (CW-style margin)."""
    true = scores.gather(1, y[:, None]).squeeze(1)
    others = scores.masked_fill(F.one_hot(y, scores.shape[1]).bool(), float("-inf"))
    return (others.max(dim=1).values - true).sum()


LOSSES: dict[str, LossFn] = {"cross_entropy": cross_entropy_loss, "margin": margin_loss}


def _require_trained(m: torch.nn.Module) -> None:
    if not getattr(m, "trained", False):
        raise UntrainedModelError("attacks need a trained model")


def input_gradient(m: torch.nn.Module, x: torch.Tensor, y: int | torch.Tensor,
                   loss_fn: LossFn | None = None, *, loss: str = "cross_entropy") -> torch.Tensor:
    """d loss / d x for the deterministic model, same shape as ``x``."""
    _require_trained(m)
    x = torch.as_tensor(x)
    batch = as_batch(x)
    check_input(m, batch)
    labels = torch.as_tensor(y).reshape(-1).to(device=model_device(m), dtype=torch.long)
    xin = batch.detach().to(device=model_device(m), dtype=model_dtype(m)).clone().requires_grad_(True)

    was_training = m.training
    m.eval()
    try:
        with torch.enable_grad():
            scores = m(xin, dropout_enabled=False)
            value = (loss_fn or LOSSES[loss])(scores, labels)
            if not value.requires_grad:
                return torch.zeros_like(x, dtype=xin.dtype)
            (grad,) = torch.autograd.grad(value, xin, allow_unused=True)
    finally:
        m.train(was_training)
    if grad is None:
        grad = torch.zeros_like(xin)
    return grad.detach().reshape(x.shape)


def project_linf(x_cand, x_orig, eps: float):
    """Clamp into the L∞ ball of radius ``eps`` around ``x_orig``, then into [0,1]."""
    if eps < 0:
        raise InvalidArgumentError(f"eps must be >= 0, got {eps}")
    as_numpy = isinstance(x_cand, np.ndarray)
    cand = torch.as_tensor(x_cand, dtype=torch.float64)
    orig = torch.as_tensor(x_orig, dtype=torch.float64)
    if cand.shape != orig.shape:
        raise ShapeMismatchError(f"candidate shape {tuple(cand.shape)} != original shape {tuple(orig.shape)}")
    out = torch.clamp(torch.minimum(torch.maximum(cand, orig - eps), orig + eps), 0.0, 1.0)
    return out.numpy() if as_numpy else out


def _sign_step(x_t: torch.Tensor, x_orig: torch.Tensor, step: float, eps: float, grad: torch.Tensor) -> torch.Tensor:
    cand = torch.clamp(x_t + step * torch.sign(grad.to(device="cpu", dtype=torch.float64)), 0.0, 1.0)
    return project_linf(cand, x_orig, eps)


def _predict(m: torch.nn.Module, x: torch.Tensor) -> int:
    batch = as_batch(x)
    with torch.no_grad():
        scores = m(batch.to(device=model_device(m), dtype=model_dtype(m)), dropout_enabled=False)
    return int(scores.argmax(dim=1)[0])


def _unpack(x: ImageSample | torch.Tensor, y: int | None, source_id: str | None) -> tuple[torch.Tensor, int, str]:
    if isinstance(x, ImageSample):
        label = x.label if y is None else int(y)
        return torch.from_numpy(np.array(x.pixels)), label, source_id or x.source_id
    if y is None:
        raise InvalidArgumentError("a true label is required for a raw tensor input")
    return torch.as_tensor(x).detach().to(device="cpu", dtype=torch.float64).clone(), int(y), source_id or ""


def _result(m, x_orig: torch.Tensor, x_adv: torch.Tensor, label: int, source_id: str,
            cfg: AttackConfig, orig_pred: int) -> AdversarialResult:
    adv_pred = _predict(m, x_adv)
    sample = ImageSample(x_adv.numpy(), label, Provenance(cfg.kind), source_id)
    return AdversarialResult(
        x_adv=sample,
        linf_distance=float((x_adv - x_orig).abs().max()),
        original_prediction=orig_pred,
        adversarial_prediction=adv_pred,
        success=orig_pred == label and adv_pred != label,
        kind=cfg.kind,
        epsilon=cfg.epsilon,
        alpha=cfg.step,
        iters=cfg.step_count,
    )


def fgsm(m: torch.nn.Module, x: ImageSample | torch.Tensor, y: int | None, cfg: AttackConfig, *,
         loss_fn: LossFn | None = None, source_id: str | None = None) -> AdversarialResult:
    if cfg.kind != "fgsm":
        raise InvalidArgumentError(f"fgsm called with a {cfg.kind} config")
    _require_trained(m)
    x0, label, sid = _unpack(x, y, source_id)
    orig_pred = _predict(m, x0)
    grad = input_gradient(m, x0, label, loss_fn, loss=cfg.loss)
    x_adv = _sign_step(x0, x0, cfg.epsilon, cfg.epsilon, grad)
    return _result(m, x0, x_adv, label, sid, cfg, orig_pred)


def random_start(x0: torch.Tensor, cfg: AttackConfig, source_id: str) -> torch.Tensor:
    rng = np.random.default_rng([cfg.seed, zlib.crc32(source_id.encode("utf-8"))])
    jitter = torch.from_numpy(rng.uniform(-cfg.epsilon, cfg.epsilon, size=tuple(x0.shape)))
    return project_linf(x0 + jitter, x0, cfg.epsilon)


def pgd(m: torch.nn.Module, x: ImageSample | torch.Tensor, y: int | None, cfg: AttackConfig, *,
        loss_fn: LossFn | None = None, source_id: str | None = None,
        on_step: Callable[[int, torch.Tensor], None] | None = None) -> AdversarialResult:
    if cfg.kind != "pgd":
        raise InvalidArgumentError(f"pgd called with a {cfg.kind} config")
    _require_trained(m)
    x0, label, sid = _unpack(x, y, source_id)
    orig_pred = _predict(m, x0)
    x_t = random_start(x0, cfg, sid) if cfg.random_start else x0.clone()
    for t in range(1, cfg.iters + 1):
        grad = input_gradient(m, x_t, label, loss_fn, loss=cfg.loss)
        x_t = _sign_step(x_t, x0, cfg.alpha, cfg.epsilon, grad)
        if on_step is not None:
            on_step(t, x_t)
    return _result(m, x0, x_t, label, sid, cfg, orig_pred)


def run_attack(m: torch.nn.Module, sample: ImageSample, cfg: AttackConfig) -> AdversarialResult:
    return fgsm(m, sample, None, cfg) if cfg.kind == "fgsm" else pgd(m, sample, None, cfg)


def attack_dataset(m: torch.nn.Module, d: Dataset | Iterable[ImageSample], cfg: AttackConfig) -> list[AdversarialResult]:
    results = [run_attack(m, s, cfg) for s in sorted(d, key=lambda s: s.source_id)]
    flipped = sum(r.success for r in results)
    logger.info("attack=%s samples=%d flipped=%d", cfg.label(), len(results), flipped)
    return results


def write_attack_artifacts(results: Sequence[AdversarialResult], out_dir: str | Path,
                           export_images: bool = False) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "attacks.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=ATTACK_COLUMNS)
        writer.writeheader()
        for r in results:
            writer.writerow(r.to_row())
    if export_images:
        images = out_dir / "images"
        images.mkdir(exist_ok=True)
        for r in results:
            Image.fromarray(to_uint8_image(r.x_adv.pixels)).save(images / f"{safe_filename(r.x_adv.source_id)}.png")
    return path
