import json

import numpy as np
import pytest

from hiergate import cli
from hiergate import config as C
from hiergate.metrics import read_reference
from hiergate.pipeline import ARTIFACTS, Experiment, MissingArtifactError, report

TINY = {
    "dataset": {"synth": {"n_train": 300, "n_val": 200, "n_test": 200}},
    "backbone": {"widths": [16, 16, 16, 16], "gated_blocks": [2, 3]},
    "train": {"warm_up_epochs": 2, "max_epochs": 6, "retrain_epochs": 3, "num_sampled_plans": 3},
    "target_rates": [1.0, 0.55],
}


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


@pytest.fixture(scope="module")
def tiny_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    outs = []
    for name in ("a", "b"):
        assert cli.main(["run", "--config", str(cfg), "--out", str(root / name)]) == 0
        outs.append(root / name)
    return outs


# -- configuration ---------------------------------------------------------------


def test_defaults_are_valid():
    cfg = C.ExperimentConfig()
    assert cfg.train.seed == cfg.seed == 0
    assert cfg.losses.target_rate == 0.55
    assert cfg.target_rates == [1.0, 0.8, 0.55, 0.4]


@pytest.mark.parametrize(("doc", "pattern"), [
    ({"bogus": 1}, "unknown key.*bogus"),
    ({"train": {"warmup": 3}}, r"unknown key\(s\) in train: warmup"),
    ({"dataset": {"synth": {"colour": 1}}}, "dataset.synth"),
    ({"train": {"seed": 3}}, "top level"),
    ({"ablation": "policy_only"}, "ablation"),
    ({"target_rates": [0.0]}, "target_rates"),
    ({"train": {"max_epochs": 1, "warm_up_epochs": 5}}, "max_epochs"),
    ({"losses": {"sparsity": -1}}, "non-negative"),
    ({"backbone": {"gated_blocks": [9]}}, "gated_blocks"),
    ({"dataset": {"source": "csv"}}, "path"),
    ({"preset": "imagenet"}, "unknown preset"),
    ({"train": []}, "must be an object"),
])
def test_invalid_configs_rejected(doc, pattern):
    with pytest.raises(C.ConfigError, match=pattern):
        C.from_dict(doc)


def test_presets_merge_under_user_values():
    cfg = C.from_dict({"preset": "nyu-like", "train": {"batch_size": 8}})
    assert cfg.train.warm_up_epochs == 20 and cfg.train.batch_size == 8
    assert cfg.train.tau_initial == 5.0 and cfg.train.tau_decay == 0.965
    assert C.from_dict({"preset": "mimic-like"}).losses.target_rate == 0.8


def test_config_hash_tracks_every_field():
    base = C.ExperimentConfig()
    h = base.config_hash()
    assert C.ExperimentConfig().config_hash() == h
    assert base.replace(output_dir="elsewhere").config_hash() == h
    for change in ({"seed": 1}, {"target_rates": [1.0]}, {"ablation": "task_only"},
                   {"train": {"batch_size": 32}}, {"losses": {"sharing": 0.1}},
                   {"dataset": {"synth": {"heterogeneity": 0.2}}}, {"backbone": {"widths": [32] * 4, "gated_blocks": [3]}}):
        assert C.from_dict(change).config_hash() != h, change


def test_load_errors(tmp_path):
    with pytest.raises(C.ConfigError, match="not found"):
        C.load(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(C.ConfigError, match="invalid JSON"):
        C.load(tmp_path / "bad.json")


def test_loss_task_weights_must_match_task_count():
    cfg = C.from_dict({**TINY, "losses": {"task": [1.0, 1.0, 1.0]}})
    with pytest.raises(C.ConfigError):
        Experiment(cfg, "/tmp/unused")


# -- CLI exit codes -----------------------------------------------------------------


def test_exit_code_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"bogus": 1}}))
    assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "config error" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()  # nothing trained


def test_exit_code_missing_artifact(tmp_path, tiny_config, capsys):
    assert cli.main(["report", "--out", str(tmp_path / "empty")]) == 4
    assert "summary.json" in capsys.readouterr().err
    assert cli.main(["evaluate", "--config", str(tiny_config), "--out", str(tmp_path / "empty")]) == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_code_divergence(tmp_path, tiny_config):
    doc = dict(TINY, train={**TINY["train"], "lr_network": 1e6})
    p = tmp_path / "hot.json"
    p.write_text(json.dumps(doc))
    assert cli.main(["single-task", "--config", str(p), "--out", str(tmp_path / "o")]) == 3


def test_target_rates_flag(tmp_path, tiny_config):
    args = cli.build_parser().parse_args(["run", "--config", str(tiny_config), "--target-rates", "1,0.8,0.55"])
    assert cli.load_config(args).target_rates == [1.0, 0.8, 0.55]


# -- pipeline ------------------------------------------------------------------------


def test_run_writes_all_artifacts(tiny_runs):
    out = tiny_runs[0]
    for name in ARTIFACTS:
        assert (out / name).exists(), name
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["delta"]) == {"hard_sharing", "task_only", "full", "full@t=1"}
    rows = [r.split(",") for r in (out / "cost.csv").read_text().splitlines()[1:]]
    full = {float(r[1]): r for r in rows if r[0].startswith("full")}
    assert full[1.0][2] == full[0.55][2]  # params constant across target rates


def test_runs_are_reproducible(tiny_runs):
    a, b = tiny_runs
    assert (a / "policy.csv").read_bytes() == (b / "policy.csv").read_bytes()
    sa, sb = (json.loads((d / "summary.json").read_text()) for d in (a, b))
    assert sa["delta"] == sb["delta"]
    sa.pop("timestamp"), sb.pop("timestamp")
    sa["config"].pop("output_dir"), sb["config"].pop("output_dir")
    assert sa == sb


def test_report_recomputes_delta_from_predictions(tiny_runs, capsys):
    out = tiny_runs[0]
    assert cli.main(["report", "--out", str(out)]) == 0
    doc = json.loads((out / "report.json").read_text())
    summary = json.loads((out / "summary.json").read_text())
    assert doc["delta"] == summary["delta"] and doc["config_hash"] == summary["config_hash"]
    assert (out / "report.csv").read_text().startswith("variant,target_rate,val_delta")


def test_report_detects_tampered_summary(tiny_runs, tmp_path):
    import shutil
    dst = tmp_path / "copy"
    shutil.copytree(tiny_runs[0], dst)
    s = json.loads((dst / "summary.json").read_text())
    s["variants"][0]["val_delta"] += 1.0
    (dst / "summary.json").write_text(json.dumps(s))
    with pytest.raises(ValueError, match="recomputed"):
        report(dst)
    (dst / "cost.csv").unlink()
    with pytest.raises(MissingArtifactError) as exc:
        report(dst)
    assert exc.value.missing == ["cost.csv"]


def test_single_task_stage(tmp_path, tiny_config, tiny_runs):
    out = tmp_path / "st"
    assert cli.main(["single-task", "--config", str(tiny_config), "--out", str(out)]) == 0
    ref = read_reference(out / "reference.csv")
    assert list(ref) == ["coarse", "fine"] and all(len(v) == 2 for v in ref.values())
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["single_task0.json", "single_task1.json"]
    first = (out / "reference.csv").read_bytes()
    assert cli.main(["single-task", "--config", str(tiny_config), "--out", str(out)]) == 0
    assert (out / "reference.csv").read_bytes() == first
    assert (tiny_runs[0] / "reference.csv").read_bytes() == first


def test_staged_commands_match_contract(tmp_path, tiny_config, capsys):
    out = str(tmp_path / "staged")
    common = ["--config", str(tiny_config), "--out", out]
    assert cli.main(["gen-data", *common]) == 0
    assert cli.main(["retrain", *common]) == 4  # no references or trainer yet
    for cmd in ("single-task", "train", "retrain", "evaluate", "sweep", "report"):
        assert cli.main([cmd, *common]) == 0, cmd
    capsys.readouterr()
    summary = json.loads((tmp_path / "staged" / "summary.json").read_text())
    assert set(summary["delta"]) == {"full", "full@t=1"}


@pytest.mark.parametrize(("ablation", "expected"), [
    ("task_only", {"hard_sharing", "task_only"}),
    ("instance_only", {"hard_sharing", "instance_only", "instance_only@t=1"}),
])
def test_ablation_modes(tmp_path, tiny_config, ablation, expected):
    out = tmp_path / ablation
    assert cli.main(["ablate", "--config", str(tiny_config), "--ablation", ablation, "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["delta"]) == expected and summary["ablation"] == ablation
    if ablation == "instance_only":
        assert summary["policy_alpha"] is None
        assert all(set(line.split(",")[1:]) == {"1.0"} for line in (out / "policy.csv").read_text().splitlines()[1:])


def test_csv_dataset_source(tmp_path):
    from hiergate.data import generate, save_csv
    cfg = C.from_dict(TINY)
    save_csv(generate(cfg.dataset.synth, 0), tmp_path / "d.csv")
    doc = dict(TINY, dataset={"source": "csv", "path": str(tmp_path / "d.csv")})
    exp = Experiment(C.from_dict(doc), tmp_path / "o")
    assert [t.name for t in exp.data.tasks] == ["coarse", "fine"]
    assert np.array_equal(exp.data.splits["val"].x, generate(cfg.dataset.synth, 0).splits["val"].x)
