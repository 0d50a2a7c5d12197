from __future__ import annotations

from pathlib import Path

import pytest

from lcbc.config import ConfigError, Settings, load_settings, parse_config_text, parse_overrides


def _write(tmp_path: Path, text: str) -> Path:
    path = tmp_path / "run.conf"
    path.write_text(text, encoding="utf-8")
    return path


def test_defaults_match_desk_preset(monkeypatch) -> None:
    for name in ("LCBC_SEED", "LCBC_ENV", "LCBC_OUT_DIR"):
        monkeypatch.delenv(name, raising=False)
    settings = load_settings()
    assert settings.env == "pendulum"
    assert settings.world_model.context == 3
    assert settings.world_model.horizon == 3
    assert settings.collect.random_transitions == 50_000
    assert settings.collect.labeled_trajectories == 250
    assert settings.barrier.gamma == 0.1
    assert settings.patch == 8
    assert settings.patch_grid == (8, 8)
    assert settings.action_bounds == (-6.0, 6.0)
    assert settings.eval.steps_for("pendulum") == 200
    assert settings.eval.steps_for("dubins") == 150


def test_sectioned_file_values_are_applied(tmp_path: Path, monkeypatch) -> None:
    monkeypatch.delenv("LCBC_SEED", raising=False)
    path = _write(
        tmp_path,
        "# desk run\n"
        "seed = 7\n"
        "env = dubins\n"
        "\n"
        "[barrier]\n"
        "hidden = 32, 16\n"
        "gamma = 0.05\n"
        "\n"
        "[policy]\n"
        "hidden = [32]\n"
        "\n"
        "[eval]\n"
        "rollout_steps = none\n",
    )
    settings = load_settings(path)
    assert settings.seed == 7
    assert settings.env == "dubins"
    assert settings.barrier.hidden == [32, 16]
    assert settings.barrier.gamma == pytest.approx(0.05)
    assert settings.policy.hidden == [32]
    assert settings.eval.rollout_steps is None
    assert settings.action_bounds == (-2.0, 2.0)


def test_overrides_beat_file_and_file_beats_environment(tmp_path: Path, monkeypatch) -> None:
    monkeypatch.setenv("LCBC_SEED", "3")
    monkeypatch.setenv("LCBC_LOG_LEVEL", "DEBUG")
    path = _write(tmp_path, "[run]\nseed = 5\n")
    assert load_settings(path).seed == 5
    assert load_settings(path).log_level == "DEBUG"
    assert load_settings(path, overrides=parse_overrides(["seed=9"])).seed == 9
    assert load_settings().seed == 3


def test_validation_error_points_at_the_offending_line(tmp_path: Path) -> None:
    path = _write(tmp_path, "seed = 1\n[world_model]\ncontext = 3\nhorizon = 0\n")
    with pytest.raises(ConfigError) as excinfo:
        load_settings(path)
    assert excinfo.value.line == 4
    assert str(excinfo.value).startswith(f"{path}:4: world_model.horizon")


def test_unknown_keys_are_rejected(tmp_path: Path) -> None:
    path = _write(tmp_path, "[barrier]\nxi3 = 1.0\n")
    with pytest.raises(ConfigError) as excinfo:
        load_settings(path)
    assert excinfo.value.line == 2


@pytest.mark.parametrize(
    ("text", "line"),
    [
        ("seed = 1\n[barrier\n", 2),
        ("seed 1\n", 1),
        ("seed = 1\nseed = 2\n", 2),
        ("[barrier]\n2x = 1\n", 2),
    ],
)
def test_malformed_text_reports_line(text: str, line: int) -> None:
    with pytest.raises(ConfigError) as excinfo:
        parse_config_text(text, source="bad.conf")
    assert excinfo.value.line == line
    assert str(excinfo.value).startswith(f"bad.conf:{line}:")


def test_cross_field_checks(tmp_path: Path) -> None:
    path = _write(tmp_path, "[render]\nwidth = 60\n")
    with pytest.raises(ConfigError, match="not divisible by encoder patch"):
        load_settings(path)
    settings = load_settings(path, check=False)
    assert settings.render.width == 60


def test_paper_preset_fills_geometry() -> None:
    settings = load_settings(overrides=parse_overrides(["encoder.preset=paper", "render.width=64", "render.height=64"]))
    assert settings.encoder.embed_dim == 384
    assert settings.encoder.heads == 6
    assert settings.patch == 4
    assert settings.patch_grid == (16, 16)


def test_override_syntax_errors() -> None:
    with pytest.raises(ConfigError, match="section.key=value"):
        parse_overrides(["seed"])
    with pytest.raises(ConfigError, match="must be `key` or `section.key`"):
        parse_overrides(["a.b.c=1"])
    assert parse_overrides(["barrier.hidden=8,8"]) == {"barrier": {"hidden": ["8", "8"]}}


def test_missing_config_file(tmp_path: Path) -> None:
    with pytest.raises(ConfigError, match="config file not found"):
        load_settings(tmp_path / "nope.conf")


def test_describe_keys_lists_sections() -> None:
    keys = Settings.describe_keys()
    assert "seed = 0" in keys
    assert "barrier.hidden = 64, 64" in keys
    assert "eval.rollout_steps = none" in keys
