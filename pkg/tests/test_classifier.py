import os

import pytest
import torch

from demineuq.classifier import (
    HISTORY_COLUMNS,
    ArchConfig,
    BernoulliDropout,
    TrainConfig,
    bernoulli_mask,
    build_classifier,
    forward,
    load_model,
    model_fingerprint,
    save_model,
    train,
    write_history_csv,
)
from demineuq.datasets import Dataset, generate_synthetic_dataset, split_dataset, SplitSpec
from demineuq.errors import (
    CheckpointFormatError,
    CheckpointVersionError,
    DivergenceError,
    EmptyDatasetError,
    ShapeMismatchError,
)
from tests.helpers import TINY_RES, tiny_arch


def test_build_small_cnn_scores_are_finite():
    m = build_classifier(ArchConfig(class_count=4, drop_rate=0.1, unfrozen_blocks=[3, 4]), seed=0)
    scores = forward(m, torch.zeros(1, 3, 64, 64))
    assert scores.shape == (1, 4)
    assert torch.isfinite(scores).all()
    assert not m.trained


def test_build_is_deterministic_given_seed():
    a = build_classifier(tiny_arch(), seed=4)
    b = build_classifier(tiny_arch(), seed=4)
    assert model_fingerprint(a) == model_fingerprint(b)
    assert model_fingerprint(a) != model_fingerprint(build_classifier(tiny_arch(), seed=5))


def test_unfrozen_blocks_outside_range_rejected():
    with pytest.raises(ValueError):
        ArchConfig(block_count=4, unfrozen_blocks=[5])


def test_zero_drop_rate_makes_dropout_a_no_op():
    m = build_classifier(tiny_arch(drop_rate=0.0), seed=0)
    x = torch.rand(2, 3, TINY_RES, TINY_RES)
    on = forward(m, x, dropout_enabled=True, generator=torch.Generator().manual_seed(1))
    off = forward(m, x, dropout_enabled=False)
    assert torch.equal(on, off)


def test_dropout_enabled_varies_with_generator_state():
    m = build_classifier(tiny_arch(drop_rate=0.5), seed=0)
    x = torch.rand(1, 3, TINY_RES, TINY_RES)
    outs = [forward(m, x, True, torch.Generator().manual_seed(s)) for s in range(10)]
    assert not all(torch.equal(outs[0], o) for o in outs[1:])


def test_dropout_disabled_is_deterministic():
    m = build_classifier(tiny_arch(drop_rate=0.5), seed=0)
    x = torch.rand(1, 3, TINY_RES, TINY_RES)
    assert torch.equal(forward(m, x), forward(m, x))


def test_all_ones_mask_matches_disabled_path():
    m = build_classifier(tiny_arch(drop_rate=0.5), seed=0)
    x = torch.rand(3, 3, TINY_RES, TINY_RES)
    feats = m.features(x)
    forced = m.fc(feats * torch.ones_like(feats))
    assert torch.allclose(forced, forward(m, x), rtol=1e-6, atol=0)


def test_inverted_scaling_preserves_expectation():
    layer = BernoulliDropout(0.3)
    x = torch.linspace(0.5, 2.0, 8)
    g = torch.Generator().manual_seed(0)
    mean = torch.stack([layer(x, True, g) for _ in range(40_000)]).mean(0)
    assert torch.allclose(mean, x, rtol=0.02)


def test_bernoulli_mask_retain_probability():
    z = bernoulli_mask((100_000,), 0.7, torch.Generator().manual_seed(3))
    assert set(z.unique().tolist()) <= {0.0, 1.0}
    assert abs(z.mean().item() - 0.7) < 0.01


def test_forward_rejects_wrong_spatial_size():
    m = build_classifier(tiny_arch(), seed=0)
    with pytest.raises(ShapeMismatchError):
        forward(m, torch.zeros(1, 3, TINY_RES * 2, TINY_RES * 2))


def test_train_config_rejects_zero_epochs():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def _splits(per_class=8):
    d = generate_synthetic_dataset(3, per_class, TINY_RES, seed=1)
    return split_dataset(d, SplitSpec(train_fraction=0.5, val_fraction=0.25, test_fraction=0.25, seed=0))


def test_train_keeps_frozen_blocks_bit_identical():
    m = build_classifier(tiny_arch(unfrozen_blocks=[4]), seed=0)
    frozen_before = {n: p.detach().clone() for n, p in m.frozen_parameters()}
    assert frozen_before
    fc_before = m.fc.weight.detach().clone()
    tr, va, _ = _splits()
    m, history = train(m, tr, va, TrainConfig(epochs=2, batch_size=4, learning_rate=1e-3, seed=0))
    for name, p in m.named_parameters():
        if name in frozen_before:
            assert torch.equal(p, frozen_before[name]), name
    assert not torch.equal(m.fc.weight, fc_before)
    assert m.trained
    assert history.epochs == 2
    for row in history.rows():
        assert 0.0 <= row["train_acc"] <= 1.0 and 0.0 <= row["val_acc"] <= 1.0
        assert row["train_loss"] >= 0.0 and row["val_loss"] >= 0.0


def test_frozen_backbone_stays_near_chance():
    d = generate_synthetic_dataset(4, 40, 32, seed=3)
    tr, va, _ = split_dataset(d, SplitSpec(train_fraction=0.5, val_fraction=0.25, test_fraction=0.25, seed=0))
    m = build_classifier(ArchConfig(class_count=4, resolution=32, drop_rate=0.1, unfrozen_blocks=[]), seed=0)
    assert [n for n, p in m.named_parameters() if p.requires_grad] == ["fc.weight", "fc.bias"]
    _, history = train(m, tr, va, TrainConfig(epochs=2, batch_size=16, learning_rate=1e-4, seed=0))
    for acc in history.train_acc:
        assert abs(acc - 0.25) <= 0.15


def test_train_is_deterministic_given_seed():
    tr, va, _ = _splits()
    cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=1e-3, seed=7)
    a, ha = train(build_classifier(tiny_arch(), seed=0), tr, va, cfg)
    b, hb = train(build_classifier(tiny_arch(), seed=0), tr, va, cfg)
    assert model_fingerprint(a) == model_fingerprint(b)
    assert ha.rows() == hb.rows()


def test_train_lowers_loss_on_easy_data():
    tr, va, _ = _splits(per_class=12)
    m, history = train(build_classifier(tiny_arch(drop_rate=0.1, unfrozen_blocks=[1, 2, 3, 4]), seed=0),
                       tr, va, TrainConfig(epochs=8, batch_size=4, learning_rate=3e-3, seed=0))
    assert history.train_loss[-1] < history.initial_train_loss


def test_train_rejects_empty_dataset():
    tr, va, _ = _splits()
    empty = Dataset((), tr.class_count, tr.class_names)
    with pytest.raises(EmptyDatasetError):
        train(build_classifier(tiny_arch(), seed=0), empty, va, TrainConfig(epochs=1))


def test_train_reports_divergence_epoch():
    tr, va, _ = _splits()
    m = build_classifier(tiny_arch(), seed=0)
    with torch.no_grad():
        m.fc.bias.fill_(float("nan"))
    with pytest.raises(DivergenceError) as info:
        train(m, tr, va, TrainConfig(epochs=3, batch_size=4))
    assert info.value.epoch == 1


def test_history_csv_columns(tmp_path):
    tr, va, _ = _splits()
    _, history = train(build_classifier(tiny_arch(), seed=0), tr, va, TrainConfig(epochs=1, batch_size=8))
    path = write_history_csv(history, tmp_path / "history.csv")
    header = path.read_text(encoding="utf-8").splitlines()[0]
    assert header == ",".join(HISTORY_COLUMNS)


def test_save_load_round_trip_is_exact(tmp_path):
    m = build_classifier(tiny_arch(), seed=3).mark_trained()
    path = save_model(m, tmp_path / "model.pt")
    loaded = load_model(path)
    assert loaded.trained
    assert loaded.arch == m.arch
    x = torch.rand(5, 3, TINY_RES, TINY_RES)
    assert (forward(m, x) - forward(loaded, x)).abs().max().item() == 0.0
    assert not os.path.exists(str(path) + ".tmp")


def test_load_truncated_checkpoint_fails(tmp_path):
    path = save_model(build_classifier(tiny_arch(), seed=0), tmp_path / "model.pt")
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 3])
    with pytest.raises(CheckpointFormatError):
        load_model(path)


def test_load_version_mismatch_names_both_versions(tmp_path):
    path = save_model(build_classifier(tiny_arch(), seed=0), tmp_path / "model.pt")
    payload = torch.load(path, weights_only=True)
    payload["format_version"] = 99
    torch.save(payload, path)
    with pytest.raises(CheckpointVersionError, match="99") as info:
        load_model(path)
    assert "1" in str(info.value)


def test_resnet_offline_falls_back_to_small_cnn():
    arch = ArchConfig(backbone="resnet50_pretrained", class_count=4, resolution=32)
    m = build_classifier(arch, seed=0)
    assert m.arch.backbone == "small_cnn"
    assert forward(m, torch.zeros(1, 3, 32, 32)).shape == (1, 4)


def test_resnet_offline_without_fallback_raises():
    from demineuq.errors import PretrainedWeightsUnavailableError

    arch = ArchConfig(backbone="resnet50_pretrained", class_count=4, fallback_to_small_cnn=False)
    with pytest.raises(PretrainedWeightsUnavailableError):
        build_classifier(arch, seed=0)


def test_frozen_modules_stay_in_eval_mode():
    m = build_classifier(tiny_arch(unfrozen_blocks=[4]), seed=0)
    m.train()
    assert not m.backbone.blocks[0].training
    assert m.backbone.blocks[3].training


def test_frozen_batch_norm_statistics_do_not_move():
    m = build_classifier(tiny_arch(unfrozen_blocks=[4]), seed=0)
    assert not m.training
    frozen_bn, trainable_bn = m.backbone.blocks[0][1], m.backbone.blocks[3][1]
    mean_before = frozen_bn.running_mean.clone()
    tr, va, _ = _splits()
    train(m, tr, va, TrainConfig(epochs=1, batch_size=4, seed=0))
    assert torch.equal(frozen_bn.running_mean, mean_before)
    assert frozen_bn.num_batches_tracked.item() == 0
    assert trainable_bn.num_batches_tracked.item() > 0


def test_fingerprint_tracks_parameters():
    m = build_classifier(tiny_arch(), seed=0)
    before = model_fingerprint(m)
    with torch.no_grad():
        m.fc.bias.add_(1.0)
    assert model_fingerprint(m) != before
