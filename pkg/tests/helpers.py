"""Shared builders and stub models for the test suite."""
import numpy as np
import torch
import torch.nn as nn

from demineuq.classifier import ArchConfig
from demineuq.datasets import ImageSample

TINY_RES = 16


def tiny_arch(**overrides) -> ArchConfig:
    base = dict(class_count=3, resolution=TINY_RES, base_width=4, drop_rate=0.3, unfrozen_blocks=(3, 4))
    base.update(overrides)
    return ArchConfig(**base)


def random_sample(rng: np.random.Generator, resolution: int = TINY_RES, label: int = 0, sid: str = "rand") -> ImageSample:
    return ImageSample(rng.uniform(0.0, 1.0, size=(3, resolution, resolution)), label, source_id=sid)


class ScriptedHead(nn.Module):
    """Returns pre-set score rows, one per head call, regardless of input."""

    def __init__(self, rows):
        super().__init__()
        self.rows = torch.tensor(rows, dtype=torch.float64)
        self.calls = 0
        self.trained = True

    def features(self, x):
        return x.flatten(1)

    def head(self, feats, dropout_enabled=False, generator=None):
        row = self.rows[self.calls]
        self.calls += 1
        return row[None, :]

    def forward(self, x, dropout_enabled=False, generator=None):
        return self.head(self.features(x), dropout_enabled, generator)


class LinearPixelModel(nn.Module):
    """scores = w * x over a single pixel; one class."""

    def __init__(self, w: float):
        super().__init__()
        self.w = w
        self.trained = True

    def forward(self, x, dropout_enabled=False, generator=None):
        return self.w * x.flatten(1)


class ConstantModel(nn.Module):
    def __init__(self, class_count: int = 3):
        super().__init__()
        self.class_count = class_count
        self.trained = True

    def forward(self, x, dropout_enabled=False, generator=None):
        return torch.zeros(x.shape[0], self.class_count)
