"""Full-pipeline runs on the desk config. Each environment takes tens of CPU minutes."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np
import pytest

from lcbc import cli, evalviz
from lcbc.pipeline import RunLayout

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.conf"
COMMANDS = ("collect-random", "collect-labeled", "train-wm", "train-safe", "eval", "viz-heatmap", "viz-pca")

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(os.environ.get("LCBC_RUN_SLOW") != "1", reason="set LCBC_RUN_SLOW=1"),
]


def _run_all(env: str, out_dir: Path) -> RunLayout:
    for command in COMMANDS:
        code = cli.main([command, "--config", str(DESK_CONFIG), "--out-dir", str(out_dir), "--set", f"env={env}"])
        assert code == cli.EXIT_OK, command
    return RunLayout(out_dir)


def _pca_probe(path: Path) -> float:
    with path.open(newline="", encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    coords = np.array([[float(row["pc1"]), float(row["pc2"])] for row in rows])
    labels = np.array([int(row["label"]) for row in rows])
    labelled = (labels == evalviz.SAFE) | (labels == evalviz.UNSAFE)
    return evalviz.linear_probe_accuracy(coords[labelled], labels[labelled] == evalviz.UNSAFE)


@pytest.mark.parametrize(("env", "accuracy_bar"), [("pendulum", 0.95), ("dubins", 0.90)])
def test_trained_certificate_meets_acceptance_bars(env: str, accuracy_bar: float, tmp_path: Path) -> None:
    layout = _run_all(env, tmp_path / env)
    report = json.loads(layout.verification.read_text(encoding="utf-8"))

    assert report["safe_accuracy"] >= accuracy_bar
    assert report["unsafe_accuracy"] >= accuracy_bar
    assert report["latent_violation_rate"] <= 0.05
    assert report["decrease_agreement"] >= 0.8
    learned = next(r for r in report["rollouts"] if r["policy"] == "learned" and r["start_region"] == "safe")
    assert learned["safety_rate"] >= 0.95

    states, labels, values = evalviz.read_heatmap_csv(layout.viz / "heatmap.csv")
    assert len(states) == 50 * 50
    assert evalviz.label_agreement(values, labels) >= 0.9
    assert _pca_probe(layout.viz / "pca.csv") >= 0.9

    with layout.stage1_report.open(newline="", encoding="utf-8") as handle:
        held_out = [float(row["held_out_pred"]) for row in csv.DictReader(handle)]
    assert held_out[-1] < held_out[0]
