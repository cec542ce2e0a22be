import json
import math

import numpy as np
import pytest
import torch

from demineuq.classifier import bernoulli_mask, build_classifier
from demineuq.errors import IncompatibleAggregationError, InvalidArgumentError, UntrainedModelError
from demineuq.mc_dropout import (
    MCConfig,
    flag_unreliable,
    mc_predict,
    mc_predict_dataset,
    pass_generator,
    summarize_passes,
    uncertainty_scalar,
    write_prediction_records,
)
from tests.helpers import TINY_RES, ScriptedHead, random_sample, tiny_arch


def _one_pixel():
    return torch.full((1, 1, 1), 0.5)


def test_hand_forced_passes_give_exact_mean_and_population_variance():
    m = ScriptedHead([[0.0, 1.0], [2.0, 3.0]])
    d = mc_predict(m, _one_pixel(), MCConfig(passes=2))
    assert d.mean.tolist() == [1.0, 2.0]
    assert d.per_class_variance.tolist() == [1.0, 1.0]
    assert d.uncertainty == 2.0
    assert d.predicted_class == 1


def test_hand_forced_three_passes():
    rows = [[1.0, -2.0, 0.5], [4.0, 0.0, 0.5], [1.0, 2.0, 0.5]]
    d = mc_predict(ScriptedHead(rows), _one_pixel(), MCConfig(passes=3))
    expected = np.array(rows)
    assert np.allclose(d.mean, expected.mean(0), atol=1e-9, rtol=0)
    assert np.allclose(d.per_class_variance, expected.var(0, ddof=0), atol=1e-9, rtol=0)
    assert d.per_class_variance[2] == 0.0


def test_single_pass_has_zero_variance():
    d = mc_predict(ScriptedHead([[0.3, 0.7]]), _one_pixel(), MCConfig(passes=1))
    assert d.per_class_variance.tolist() == [0.0, 0.0]
    assert d.uncertainty == 0.0


def test_uniform_softmax_mean_has_entropy_log_c():
    d = summarize_passes(np.full((5, 4), 0.25), MCConfig(passes=5, aggregation="predictive_entropy"))
    assert d.uncertainty == pytest.approx(math.log(4), abs=1e-12)
    assert d.mutual_information == pytest.approx(0.0, abs=1e-12)


def test_entropy_on_logits_is_incompatible():
    d = summarize_passes(np.zeros((3, 2)), MCConfig(passes=3))
    with pytest.raises(IncompatibleAggregationError):
        uncertainty_scalar(d, "predictive_entropy")


def test_explicit_incompatible_config_rejected():
    with pytest.raises(ValueError):
        MCConfig(aggregation="predictive_entropy", score_space="logits")


def test_score_space_follows_aggregation():
    assert MCConfig().score_space == "logits"
    assert MCConfig(aggregation="sum_variance_softmax").score_space == "softmax"
    assert MCConfig(aggregation="predictive_entropy").score_space == "softmax"


def test_untrained_model_rejected():
    m = build_classifier(tiny_arch(), seed=0)
    with pytest.raises(UntrainedModelError):
        mc_predict(m, torch.zeros(3, TINY_RES, TINY_RES), MCConfig(passes=2))


@pytest.mark.parametrize("passes", [1, 10, 100])
def test_zero_drop_rate_gives_zero_variance(passes):
    m = build_classifier(tiny_arch(drop_rate=0.0), seed=0).mark_trained()
    rng = np.random.default_rng(0)
    for k in range(50):
        d = mc_predict(m, random_sample(rng, sid=f"r{k}"), MCConfig(passes=passes, seed=k))
        assert np.all(d.per_class_variance == 0.0)
        assert d.uncertainty == 0.0


def test_same_seed_is_bitwise_reproducible(tiny_model):
    x = random_sample(np.random.default_rng(1))
    a = mc_predict(tiny_model, x, MCConfig(passes=20, seed=9))
    b = mc_predict(tiny_model, x, MCConfig(passes=20, seed=9))
    assert a.per_pass_scores.tobytes() == b.per_pass_scores.tobytes()
    assert a.uncertainty == b.uncertainty


def test_pass_streams_are_prefix_stable(tiny_model):
    x = random_sample(np.random.default_rng(2))
    short = mc_predict(tiny_model, x, MCConfig(passes=10, seed=4))
    long = mc_predict(tiny_model, x, MCConfig(passes=25, seed=4))
    assert np.array_equal(short.per_pass_scores, long.per_pass_scores[:10])


def test_passes_actually_vary_with_dropout(tiny_model):
    d = mc_predict(tiny_model, random_sample(np.random.default_rng(3)), MCConfig(passes=30))
    assert d.uncertainty > 0.0


def test_variance_matches_moment_identity(tiny_model):
    d = mc_predict(tiny_model, random_sample(np.random.default_rng(4)), MCConfig(passes=50))
    y = d.per_pass_scores
    identity = (y ** 2).mean(0) - y.mean(0) ** 2
    assert np.allclose(d.per_class_variance, identity, rtol=1e-6, atol=1e-12)


def test_pass_masks_are_uncorrelated():
    masks = torch.stack([bernoulli_mask((8,), 0.5, pass_generator(17, i)) for i in range(10_001)]).numpy()
    assert abs(masks.mean() - 0.5) < 0.01
    for unit in range(masks.shape[1]):
        rho = np.corrcoef(masks[:-1, unit], masks[1:, unit])[0, 1]
        assert abs(rho) < 0.05


def test_predicted_class_survives_affine_rescaling(tiny_model):
    rng = np.random.default_rng(8)
    cfg = MCConfig(passes=20)
    for k in range(20):
        scores = mc_predict(tiny_model, random_sample(rng, sid=f"a{k}"), MCConfig(passes=20, seed=k)).per_pass_scores
        base = summarize_passes(scores, cfg).predicted_class
        for scale, shift in ((2.5, 0.0), (0.1, -3.0), (7.0, 11.0)):
            assert summarize_passes(scale * scores + shift, cfg).predicted_class == base


def test_uncertainty_spread_shrinks_with_more_passes(tiny_model):
    rng = np.random.default_rng(9)
    ratios = []
    for k in range(3):
        x = random_sample(rng, sid=f"n{k}")
        stderr = {}
        for n in (10, 100):
            # seeds g*1024 keep the ten pass streams disjoint for n <= 1024
            u = [mc_predict(tiny_model, x, MCConfig(passes=n, seed=g * 1024)).uncertainty for g in range(10)]
            stderr[n] = np.std(u, ddof=1) / np.sqrt(len(u))
        ratios.append(stderr[100] / stderr[10])
    assert np.median(ratios) < 1.0


def test_softmax_space_rows_are_distributions(tiny_model):
    d = mc_predict(tiny_model, random_sample(np.random.default_rng(5)),
                   MCConfig(passes=10, aggregation="sum_variance_softmax"))
    assert np.allclose(d.per_pass_scores.sum(1), 1.0)
    assert d.mutual_information is not None and d.mutual_information >= 0.0


def test_flag_is_strictly_above_threshold():
    d = summarize_passes(np.array([[0.0, 1.0], [2.0, 3.0]]), MCConfig(passes=2))
    assert not flag_unreliable(d, 2.0)
    assert flag_unreliable(d, 1.999)
    assert not flag_unreliable(d, float("inf"))
    with pytest.raises(InvalidArgumentError):
        flag_unreliable(d, -0.1)


def test_dataset_predictions_sorted_and_written(tiny_model, tiny_dataset, tmp_path):
    dists = mc_predict_dataset(tiny_model, list(reversed(tiny_dataset.samples)), MCConfig(passes=4))
    ids = [d.source_id for d in dists]
    assert ids == sorted(ids)
    path = write_prediction_records(dists, tmp_path / "predictions.jsonl")
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == len(tiny_dataset)
    record = json.loads(lines[0])
    assert record["source_id"] == ids[0]
    assert record["passes"] == 4
    assert len(record["mean_scores"]) == 3
