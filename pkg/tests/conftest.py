import pytest

from demineuq.classifier import build_classifier
from demineuq.datasets import generate_synthetic_dataset
from tests.helpers import TINY_RES, tiny_arch


@pytest.fixture(autouse=True)
def _offline(monkeypatch, tmp_path):
    monkeypatch.setenv("UQ_OFFLINE", "1")
    monkeypatch.setenv("UQ_OUTPUT_DIR", str(tmp_path / "runs"))


@pytest.fixture
def tiny_model():
    """Untrained weights flagged as trained: enough for inference and attack tests."""
    return build_classifier(tiny_arch(), seed=0).mark_trained()


@pytest.fixture
def tiny_dataset():
    return generate_synthetic_dataset(class_count=3, per_class=10, resolution=TINY_RES, seed=5)
