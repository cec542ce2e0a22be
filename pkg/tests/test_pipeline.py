import csv
import json

import pytest
import yaml

from demineuq.cli import main
from demineuq.errors import ConfigMismatchError, InvalidArgumentError, UnknownAxisError
from demineuq.experiment import parse_config
from demineuq.pipeline import (
    LATEST_NAME,
    SWEEP_COLUMNS,
    RunManifest,
    rebuild_report,
    resolve_run_dir,
    run_experiment,
    run_sweep,
)
from tests.helpers import TINY_RES

TINY_CONFIG = {
    "name": "tiny",
    "dataset": {
        "class_count": 3, "per_class": 8, "resolution": TINY_RES, "seed": 0,
        "split": {"train_fraction": 0.5, "val_fraction": 0.25, "test_fraction": 0.25, "seed": 1},
    },
    "arch": {"class_count": 3, "resolution": TINY_RES, "base_width": 4, "drop_rate": 0.2, "unfrozen_blocks": [3, 4]},
    "train": {"epochs": 1, "batch_size": 4, "learning_rate": 0.001, "seed": 2},
    "mc": {"passes": 3, "seed": 3},
    "attacks": [
        {"kind": "fgsm", "epsilon": 0.01, "seed": 10},
        {"kind": "fgsm", "epsilon": 0.05, "seed": 11},
        {"kind": "pgd", "epsilon": 0.03, "iters": 2, "seed": 12},
    ],
    "noise": [{"kind": "gaussian", "strength": 0.05, "seed": 20}, {"kind": "gaussian", "strength": 0.1, "seed": 21}],
    "thresholds": [0.1],
}


def _cfg(tmp_path, **updates):
    return parse_config({**TINY_CONFIG, "output_dir": str(tmp_path / "out"), **updates})


def _report_without_stamp(path):
    data = json.loads(path.read_text(encoding="utf-8"))
    data.pop("generated_at")
    return data


@pytest.fixture
def tiny_run(tmp_path):
    return run_experiment(_cfg(tmp_path))


def test_run_produces_complete_manifest(tiny_run, tmp_path):
    assert tiny_run.complete
    assert tiny_run.error is None
    assert tiny_run.missing_artifacts() == []
    for name in ("config", "model", "history", "clean/report", "fgsm/eps-0.01/report", "fgsm/eps-0.01/attacks",
                 "pgd/eps-0.03/report", "noisy/gaussian-0.1/report", "trend/fgsm", "trend/noisy-gaussian",
                 "flagging", "plots/trend", "plots/history"):
        assert tiny_run.artifact(name).is_file(), name

    loaded = RunManifest.load(tiny_run.run_dir)
    assert loaded.status == "complete"
    assert loaded.seeds["attacks"] == [10, 11, 12]
    assert set(loaded.timings) >= {"dataset", "train", "clean", "analysis"}
    assert resolve_run_dir(tmp_path / "out") == tiny_run.path.parent
    assert (tmp_path / "out" / LATEST_NAME).is_file()


def test_run_summary(tiny_run):
    s = tiny_run.summary
    assert 0.0 <= s["clean_accuracy"] <= 1.0
    assert s["clean_median_uncertainty"] >= 0.0
    assert set(s["trends"]) == {"fgsm", "noisy-gaussian"}
    assert s["trends"]["fgsm"]["strengths"] == [0.01, 0.05]
    assert s["dataset"] == {"train": 12, "val": 6, "test": 6, "per_class_train": s["dataset"]["per_class_train"]}


def test_flagging_file_covers_percentile_and_thresholds(tiny_run):
    flagging = json.loads(tiny_run.artifact("flagging").read_text(encoding="utf-8"))
    assert flagging["percentile"] == 95.0
    thresholds = {c["threshold"] for c in flagging["comparisons"]}
    assert 0.1 in thresholds and flagging["percentile_threshold"] in thresholds


def test_runs_are_deterministic_and_never_overwrite(tmp_path):
    a = run_experiment(_cfg(tmp_path))
    b = run_experiment(_cfg(tmp_path))
    assert a.run_dir != b.run_dir
    assert a.summary["model_fingerprint"] == b.summary["model_fingerprint"]
    for name in ("clean/report", "fgsm/eps-0.05/report", "pgd/eps-0.03/report", "noisy/gaussian-0.05/report"):
        assert _report_without_stamp(a.artifact(name)) == _report_without_stamp(b.artifact(name))


def test_eval_from_checkpoint(tiny_run, tmp_path):
    cfg = _cfg(tmp_path)
    m = run_experiment(cfg, stages=("clean",), model_path=tiny_run.artifact("model"))
    assert m.complete
    assert m.summary["model_fingerprint"] == tiny_run.summary["model_fingerprint"]
    assert _report_without_stamp(m.artifact("clean/report")) == _report_without_stamp(tiny_run.artifact("clean/report"))


def test_eval_with_mismatched_arch_fails(tiny_run, tmp_path):
    arch = {**TINY_CONFIG["arch"], "drop_rate": 0.5}
    with pytest.raises(ConfigMismatchError):
        run_experiment(_cfg(tmp_path, arch=arch), stages=("clean",), model_path=tiny_run.artifact("model"))


def test_failed_run_leaves_incomplete_manifest(tmp_path):
    with pytest.raises(Exception):
        run_experiment(_cfg(tmp_path), stages=("clean",), model_path=tmp_path / "missing.pt")
    run_dir = resolve_run_dir(tmp_path / "out")
    manifest = RunManifest.load(run_dir)
    assert manifest.status == "incomplete"
    assert manifest.error is not None


def test_stage_arguments_validated(tmp_path):
    with pytest.raises(InvalidArgumentError):
        run_experiment(_cfg(tmp_path), stages=("bogus",))
    with pytest.raises(InvalidArgumentError):
        run_experiment(_cfg(tmp_path), stages=("clean",))


def test_rebuild_report_restores_trends(tiny_run):
    tiny_run.artifact("trend/fgsm").unlink()
    rebuilt = rebuild_report(tiny_run.run_dir)
    assert tiny_run.artifact("trend/fgsm").is_file()
    assert rebuilt.summary["trends"]["fgsm"] == tiny_run.summary["trends"]["fgsm"]


def test_train_only_sweep_writes_summary(tmp_path):
    manifests = run_sweep(_cfg(tmp_path), "arch.drop_rate", [0.0, 0.3], train_only=True)
    assert [m.config["arch"]["drop_rate"] for m in manifests] == [0.0, 0.3]
    sweep_dirs = list((tmp_path / "out").glob("sweep-arch_drop_rate-*"))
    assert len(sweep_dirs) == 1
    with (sweep_dirs[0] / "sweep_summary.csv").open(encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0].keys()) == SWEEP_COLUMNS
    assert [r["axis_value"] for r in rows] == ["0.0", "0.3"]


def test_sweep_argument_errors(tmp_path):
    with pytest.raises(InvalidArgumentError):
        run_sweep(_cfg(tmp_path), "arch.drop_rate", [])
    with pytest.raises(UnknownAxisError):
        run_sweep(_cfg(tmp_path), "arch.nope", [0.1])


def test_cli_run_and_report(tmp_path, capsys):
    config = tmp_path / "tiny.yaml"
    config.write_text(yaml.safe_dump(TINY_CONFIG), encoding="utf-8")
    out = tmp_path / "cli"
    assert main(["run", "--config", str(config), "--output", str(out)]) == 0
    assert "status=complete" in capsys.readouterr().out
    assert main(["report", str(out)]) == 0


def test_cli_errors_exit_two(tmp_path, capsys):
    assert main(["train", "--set", "train.epochs=0"]) == 2
    err = capsys.readouterr().err
    assert "train.epochs" in err and "reason=config_validation" in err
    assert main(["report", str(tmp_path / "nothing")]) == 2


def test_cli_dataset_inspect(capsys):
    assert main(["dataset", "inspect", "--set", "dataset.per_class=3"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["samples"] == 12
