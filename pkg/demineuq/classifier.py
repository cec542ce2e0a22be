"""Convolutional classifier with block-level freezing and a single Bernoulli
dropout layer in front of the final linear head.

The model is split at the dropout layer: ``features(x)`` is the deterministic
backbone (ending in global average pooling) and ``head(f, ...)`` applies the
dropout mask and the final linear layer. Dropout is switched by the explicit
``dropout_enabled`` argument, never by ``model.training``, and its masks come
from a caller-supplied ``torch.Generator``.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Literal

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from .config import get_config
from .datasets import Dataset, dataset_to_tensors
from .errors import (
    CheckpointFormatError,
    CheckpointVersionError,
    DivergenceError,
    EmptyDatasetError,
    InvalidArgumentError,
    PretrainedWeightsUnavailableError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "demineuq-checkpoint"
CHECKPOINT_VERSION = 1
HISTORY_COLUMNS = ("epoch", "train_acc", "train_loss", "val_acc", "val_loss")

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)
_EVAL_BATCH = 256


class ArchConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    backbone: Literal["small_cnn", "resnet50_pretrained"] = "small_cnn"
    block_count: int = Field(4, ge=1)
    class_count: int = Field(4, ge=2)
    drop_rate: float = Field(0.1, ge=0.0, lt=1.0)
    unfrozen_blocks: tuple[int, ...] = (3, 4)
    resolution: int = Field(64, ge=16)
    base_width: int = Field(32, ge=1)
    fallback_to_small_cnn: bool = True

    @field_validator("unfrozen_blocks", mode="before")
    @classmethod
    def _normalize_blocks(cls, v):
        if v is None:
            return ()
        return tuple(sorted(set(int(b) for b in v)))

    @model_validator(mode="after")
    def _check_blocks(self) -> "ArchConfig":
        bad = [b for b in self.unfrozen_blocks if not 1 <= b <= self.block_count]
        if bad:
            raise ValueError(f"unfrozen_blocks {bad} outside 1..{self.block_count}")
        if self.backbone == "resnet50_pretrained" and self.block_count != 4:
            raise ValueError("resnet50_pretrained has exactly 4 blocks")
        if self.backbone == "small_cnn" and self.resolution < 2 ** self.block_count:
            raise ValueError(f"resolution {self.resolution} too small for {self.block_count} downsampling blocks")
        return self

    @property
    def retain_prob(self) -> float:
        return 1.0 - self.drop_rate


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(30, ge=1)
    batch_size: int = Field(16, ge=1)
    learning_rate: float = Field(1e-4, gt=0.0)
    seed: int = Field(0, ge=0)
    optimizer: Literal["adam", "adamw", "sgd"] = "adam"
    weight_decay: float = Field(0.0, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)


@dataclass
class TrainHistory:
    train_acc: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    initial_train_loss: float | None = None

    @property
    def epochs(self) -> int:
        return len(self.train_acc)

    def append(self, train_acc: float, train_loss: float, val_acc: float, val_loss: float) -> None:
        self.train_acc.append(train_acc)
        self.train_loss.append(train_loss)
        self.val_acc.append(val_acc)
        self.val_loss.append(val_loss)

    def rows(self) -> list[dict]:
        return [
            {"epoch": i + 1, "train_acc": a, "train_loss": l, "val_acc": va, "val_loss": vl}
            for i, (a, l, va, vl) in enumerate(zip(self.train_acc, self.train_loss, self.val_acc, self.val_loss))
        ]

    def final(self) -> dict:
        if not self.train_acc:
            return {}
        return {k: v for k, v in self.rows()[-1].items() if k != "epoch"}

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Layers


def bernoulli_mask(shape: torch.Size | tuple[int, ...], retain_p: float, generator: torch.Generator | None = None,
                   *, device: torch.device | str = "cpu", dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """z ~ Bernoulli(retain_p), drawn on the generator's (CPU) stream and then
    moved, so masks do not depend on the compute device."""
    u = torch.rand(tuple(shape), generator=generator)
    return (u < retain_p).to(device=device, dtype=dtype)


class BernoulliDropout(nn.Module):
    """Inverted dropout: survivors are scaled by 1/p at mask time."""

    def __init__(self, drop_rate: float) -> None:
        super().__init__()
        if not 0.0 <= drop_rate < 1.0:
            raise InvalidArgumentError(f"drop_rate must be in [0,1), got {drop_rate}")
        self.drop_rate = float(drop_rate)

    def forward(self, x: torch.Tensor, enabled: bool = False, generator: torch.Generator | None = None) -> torch.Tensor:
        if not enabled or self.drop_rate == 0.0:
            return x
        p = 1.0 - self.drop_rate
        return x * bernoulli_mask(x.shape, p, generator, device=x.device, dtype=x.dtype) / p

    def extra_repr(self) -> str:
        return f"drop_rate={self.drop_rate}"


class SmallCNNBackbone(nn.Module):
    """Desk-scale backbone: ``block_count`` × (conv3x3 → batch-norm → ReLU →
    maxpool), widths doubling per block, then global average pooling.

    Convolutions use He-normal init.
    """

    def __init__(self, block_count: int, base_width: int) -> None:
        super().__init__()
        blocks = []
        cin = 3
        for i in range(block_count):
            cout = base_width * 2 ** i
            conv = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
            nn.init.kaiming_normal_(conv.weight, mode="fan_in", nonlinearity="relu")
            blocks.append(nn.Sequential(conv, nn.BatchNorm2d(cout), nn.ReLU(), nn.MaxPool2d(2)))
            cin = cout
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.feature_dim = cin

    def stem_modules(self) -> list[nn.Module]:
        return []

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x * 2.0 - 1.0
        for block in self.blocks:
            x = block(x)
        return self.pool(x).flatten(1)


class ResNetBackbone(nn.Module):
    """torchvision ResNet-50 with layer1..layer4 as blocks 1..4. ImageNet
    normalization happens inside, so callers feed [0,1] pixels."""

    def __init__(self, net: nn.Module) -> None:
        super().__init__()
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.blocks = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
        self.pool = net.avgpool
        self.feature_dim = net.fc.in_features
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    def stem_modules(self) -> list[nn.Module]:
        return [self.stem]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem((x - self.mean) / self.std)
        for block in self.blocks:
            x = block(x)
        return self.pool(x).flatten(1)


class ClassifierModel(nn.Module):
    def __init__(self, arch: ArchConfig, backbone: nn.Module) -> None:
        super().__init__()
        self.arch = arch
        self.backbone = backbone
        self.dropout = BernoulliDropout(arch.drop_rate)
        self.fc = nn.Linear(backbone.feature_dim, arch.class_count)
        self.trained = False
        self._apply_freeze()

    def _frozen_modules(self) -> list[nn.Module]:
        frozen = list(self.backbone.stem_modules())
        frozen += [b for i, b in enumerate(self.backbone.blocks, start=1) if i not in self.arch.unfrozen_blocks]
        return frozen

    def _apply_freeze(self) -> None:
        for module in self._frozen_modules():
            for p in module.parameters():
                p.requires_grad_(False)

    def train(self, mode: bool = True) -> "ClassifierModel":
        super().train(mode)
        # frozen blocks keep eval-mode batch-norm statistics
        for module in self._frozen_modules():
            module.eval()
        return self

    def frozen_parameters(self) -> Iterator[tuple[str, nn.Parameter]]:
        return ((n, p) for n, p in self.named_parameters() if not p.requires_grad)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def head(self, feats: torch.Tensor, dropout_enabled: bool = False,
             generator: torch.Generator | None = None) -> torch.Tensor:
        return self.fc(self.dropout(feats, dropout_enabled, generator))

    def forward(self, x: torch.Tensor, dropout_enabled: bool = False,
                generator: torch.Generator | None = None) -> torch.Tensor:
        return self.head(self.features(x), dropout_enabled, generator)

    def mark_trained(self) -> "ClassifierModel":
        self.trained = True
        return self


# ---------------------------------------------------------------------------
# Construction


def _download_resnet50() -> nn.Module:
    import torchvision

    cfg = get_config()
    if cfg.OFFLINE:
        raise PretrainedWeightsUnavailableError("UQ_OFFLINE=1: pretrained ResNet-50 weights are not downloaded")
    retrying = Retrying(
        stop=stop_after_attempt(max(1, cfg.PRETRAINED_RETRIES)),
        wait=wait_exponential(multiplier=0.5, max=8),
        retry=retry_if_exception_type(OSError),
        reraise=True,
    )
    try:
        for attempt in retrying:
            with attempt:
                return torchvision.models.resnet50(weights=torchvision.models.ResNet50_Weights.IMAGENET1K_V1)
    except (OSError, RuntimeError) as e:
        raise PretrainedWeightsUnavailableError(f"could not obtain pretrained ResNet-50 weights: {e}") from e
    raise PretrainedWeightsUnavailableError("could not obtain pretrained ResNet-50 weights")


def _assemble(arch: ArchConfig, load_weights: bool) -> ClassifierModel:
    if arch.backbone == "small_cnn":
        return ClassifierModel(arch, SmallCNNBackbone(arch.block_count, arch.base_width))
    if load_weights:
        net = _download_resnet50()
    else:
        import torchvision

        net = torchvision.models.resnet50(weights=None)
    return ClassifierModel(arch, ResNetBackbone(net))


def build_classifier(arch: ArchConfig, seed: int = 0) -> ClassifierModel:
    """Untrained classifier with deterministic head/backbone initialization.

    ``resnet50_pretrained`` needs the ImageNet weights; when they cannot be
    obtained the build falls back to ``small_cnn`` if the arch allows it.
    The model comes back in eval mode.
    """
    if arch.backbone == "resnet50_pretrained":
        try:
            net = _download_resnet50()
        except PretrainedWeightsUnavailableError as e:
            if not arch.fallback_to_small_cnn:
                raise
            logger.warning("pretrained backbone unavailable, falling back to small_cnn: %s", e)
            arch = arch.model_copy(update={"backbone": "small_cnn"})
        else:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                model = ClassifierModel(arch, ResNetBackbone(net))
            return model.to(get_config().DEVICE).eval()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = _assemble(arch, load_weights=False)
    logger.info("built classifier backbone=%s classes=%d drop_rate=%.3f unfrozen=%s seed=%d",
                arch.backbone, arch.class_count, arch.drop_rate, list(arch.unfrozen_blocks), seed)
    return model.to(get_config().DEVICE).eval()


# ---------------------------------------------------------------------------
# Inference helpers


def model_device(m: nn.Module) -> torch.device:
    for p in m.parameters():
        return p.device
    return torch.device("cpu")


def model_dtype(m: nn.Module) -> torch.dtype:
    for p in m.parameters():
        return p.dtype
    return torch.float32


def as_batch(x: torch.Tensor) -> torch.Tensor:
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(x)
    return x.unsqueeze(0) if x.ndim == 3 else x


def check_input(m: nn.Module, batch: torch.Tensor) -> None:
    arch = getattr(m, "arch", None)
    if arch is not None:
        expected = (3, arch.resolution, arch.resolution)
        if batch.ndim != 4 or tuple(batch.shape[1:]) != expected:
            raise ShapeMismatchError(f"expected input batch of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), "
                                     f"got {tuple(batch.shape)}")
    if batch.numel() and (batch.min() < 0 or batch.max() > 1):
        raise InvalidArgumentError("input pixels must lie in [0,1]")


def forward(m: nn.Module, x: torch.Tensor, dropout_enabled: bool = False,
            generator: torch.Generator | None = None) -> torch.Tensor:
    """Pre-softmax class scores for an image or image batch."""
    batch = as_batch(x)
    check_input(m, batch)
    batch = batch.to(device=model_device(m), dtype=model_dtype(m))
    return m(batch, dropout_enabled=dropout_enabled, generator=generator)


@torch.no_grad()
def _evaluate(m: ClassifierModel, x: torch.Tensor, y: torch.Tensor) -> tuple[float, float]:
    m.eval()
    device = model_device(m)
    loss_sum, correct = 0.0, 0
    for start in range(0, len(x), _EVAL_BATCH):
        xb, yb = x[start:start + _EVAL_BATCH].to(device), y[start:start + _EVAL_BATCH].to(device)
        scores = m(xb, dropout_enabled=False)
        loss_sum += F.cross_entropy(scores, yb, reduction="sum").item()
        correct += int((scores.argmax(1) == yb).sum().item())
    return correct / len(x), loss_sum / len(x)


def _make_optimizer(cfg: TrainConfig, params: list[nn.Parameter]) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def train(m: ClassifierModel, train_set: Dataset, val_set: Dataset,
          cfg: TrainConfig) -> tuple[ClassifierModel, TrainHistory]:
    """Minimize cross-entropy over shuffled mini-batches with dropout active.

    Shuffling and dropout masks use two generators seeded from ``cfg.seed``;
    frozen-block parameters never receive gradients.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptyDatasetError("train and val datasets must be non-empty")
    for name, d in (("train", train_set), ("val", val_set)):
        if d.class_count != m.arch.class_count:
            raise InvalidArgumentError(f"{name} dataset has {d.class_count} classes, model expects {m.arch.class_count}")

    x_tr, y_tr = dataset_to_tensors(train_set, model_dtype(m))
    x_va, y_va = dataset_to_tensors(val_set, model_dtype(m))
    check_input(m, x_tr[:1])
    device = model_device(m)
    opt = _make_optimizer(cfg, m.trainable_parameters())
    shuffle_gen = torch.Generator().manual_seed(cfg.seed)
    mask_gen = torch.Generator().manual_seed(cfg.seed + 1)

    history = TrainHistory()
    history.initial_train_loss = _evaluate(m, x_tr, y_tr)[1]
    n = len(x_tr)
    for epoch in range(1, cfg.epochs + 1):
        m.train()
        perm = torch.randperm(n, generator=shuffle_gen)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb, yb = x_tr[idx].to(device), y_tr[idx].to(device)
            scores = m(xb, dropout_enabled=True, generator=mask_gen)
            loss = F.cross_entropy(scores, yb)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}", epoch=epoch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
            correct += int((scores.argmax(1) == yb).sum().item())
        val_acc, val_loss = _evaluate(m, x_va, y_va)
        history.append(correct / n, loss_sum / n, val_acc, val_loss)
        logger.info("epoch=%d train_acc=%.4f train_loss=%.4f val_acc=%.4f val_loss=%.4f",
                    epoch, correct / n, loss_sum / n, val_acc, val_loss)

    m.eval()
    m.trained = True
    return m, history


def write_history_csv(history: TrainHistory, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        writer.writerows(history.rows())
    return path


# ---------------------------------------------------------------------------
# Checkpoints


def save_model(m: ClassifierModel, path: str | Path) -> Path:
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "arch": m.arch.model_dump(mode="json"),
        "trained": bool(m.trained),
        "state_dict": {k: v.detach().cpu() for k, v in m.state_dict().items()},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_model(path: str | Path) -> ClassifierModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointFormatError(f"could not read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointFormatError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(payload.get("format_version"), CHECKPOINT_VERSION)
    try:
        arch = ArchConfig.model_validate(payload["arch"])
        model = _assemble(arch, load_weights=False)
        model.load_state_dict(payload["state_dict"], strict=True)
    except (KeyError, ValueError, RuntimeError) as e:
        raise CheckpointFormatError(f"checkpoint {path} is malformed: {e}") from e
    model.trained = bool(payload.get("trained", False))
    return model.eval().to(get_config().DEVICE)


def model_fingerprint(m: nn.Module) -> str:
    digest = hashlib.sha256()
    digest.update(type(m).__name__.encode("utf-8"))
    for name, tensor in sorted(m.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
