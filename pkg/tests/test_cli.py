from __future__ import annotations

import json
from pathlib import Path

import pytest

from lcbc import cli
from lcbc.ndmath import NumericError
from lcbc.pipeline import RunLayout

SMALL_CONFIG = """\
# tiny pendulum run
[run]
env = pendulum
seed = 3
log_level = WARNING

[render]
width = 16
height = 16

[encoder]
patch = 4
embed_dim = 8
depth = 0
heads = 2
pretrain_epochs = 1
batch_size = 32
decoder_hidden = 8

[world_model]
context = 1
horizon = 1
blocks = 1
heads = 2
epochs = 2
batch_size = 16

[barrier]
hidden = [8]

[policy]
hidden = [8]

[collect]
random_transitions = 60
episode_length = 20
labeled_trajectories = 80
labeled_episode_length = 30
workers = 2

[train]
stage2_max_epochs = 5
batch_size = 32
holdout_fraction = 0.3

[eval]
verify_samples = 200
rollout_starts = 3
rollout_steps = 10
heatmap_grid = 5
pca_samples = 60
workers = 2
"""


def _config(tmp_path: Path) -> Path:
    path = tmp_path / "small.conf"
    path.write_text(SMALL_CONFIG, encoding="utf-8")
    return path


def _run(tmp_path: Path, command: str, *extra: str) -> int:
    return cli.main([command, "--config", str(_config(tmp_path)), "--out-dir", str(tmp_path / "run"), *extra])


def test_invalid_config_value_reports_line(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    path = tmp_path / "bad.conf"
    path.write_text("[run]\nenv = pendulum\n\n[world_model]\nhorizon = 0\n", encoding="utf-8")
    assert cli.main(["collect-random", "--config", str(path), "--out-dir", str(tmp_path)]) == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert f"{path}:5:" in err
    assert "world_model.horizon" in err


def test_malformed_override_is_a_config_error(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert _run(tmp_path, "collect-random", "--set", "encoder.patch") == cli.EXIT_CONFIG
    assert "section.key=value" in capsys.readouterr().err


def test_usage_errors_exit_as_config_errors(capsys: pytest.CaptureFixture[str]) -> None:
    assert cli.main(["train-everything"]) == cli.EXIT_CONFIG
    assert "invalid choice" in capsys.readouterr().err
    assert cli.main(["eval", "--seed", "eleven"]) == cli.EXIT_CONFIG
    assert cli.EXIT_CONFIG != cli.EXIT_MISSING


def test_help_still_exits_cleanly(capsys: pytest.CaptureFixture[str]) -> None:
    with pytest.raises(SystemExit) as info:
        cli.main(["--help"])
    assert info.value.code == 0
    assert "config keys" in capsys.readouterr().out


def test_train_safe_without_stage1_exits_with_missing_artifact(
    tmp_path: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    assert _run(tmp_path, "train-safe") == cli.EXIT_MISSING
    err = capsys.readouterr().err
    assert "stage-1 encoder checkpoint" in err
    assert "encoder.lcbc" in err


def test_train_wm_without_dataset_names_the_command_to_run(
    tmp_path: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    assert _run(tmp_path, "train-wm") == cli.EXIT_MISSING
    assert "collect-random" in capsys.readouterr().err


def test_numeric_failure_exit_code(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    def diverge(settings, layout) -> None:
        raise NumericError("non-finite loss")

    monkeypatch.setitem(cli.COMMANDS, "train-wm", (diverge, "always diverges"))
    assert _run(tmp_path, "train-wm") == cli.EXIT_NUMERIC


def test_seed_flag_overrides_config(tmp_path: Path) -> None:
    assert _run(tmp_path, "collect-random", "--seed", "11") == cli.EXIT_OK
    manifest = (tmp_path / "run" / "datasets" / "random" / "manifest.txt").read_text(encoding="utf-8")
    assert "seed = 11" in manifest
    assert "transitions = 60" in manifest


def test_full_pipeline_writes_every_artifact(tmp_path: Path) -> None:
    for command in ("collect-random", "collect-labeled", "train-wm", "train-safe", "eval", "viz-heatmap", "viz-pca", "rollout"):
        assert _run(tmp_path, command) == cli.EXIT_OK, command

    layout = RunLayout(tmp_path / "run")
    for path in (layout.encoder, layout.world_model, layout.barrier, layout.policy, layout.stage1_report, layout.stage2_report):
        assert path.is_file(), path
    report = json.loads(layout.verification.read_text(encoding="utf-8"))
    assert report["env"] == "pendulum"
    assert report["seed"] == 3
    assert {entry["policy"] for entry in report["rollouts"]} == {"learned", "reference"}
    assert 0.0 <= report["decrease_agreement"] <= 1.0
    assert (layout.viz / "heatmap.csv").read_text(encoding="utf-8").count("\n") == 1 + 25
    assert (layout.viz / "heatmap.ppm").is_file()
    assert (layout.viz / "pca.csv").read_text(encoding="utf-8").count("\n") == 1 + 60
    assert (layout.viz / "trajectories.csv").read_text(encoding="utf-8").startswith("policy,rollout,step,theta,theta_dot,label")
