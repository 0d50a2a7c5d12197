from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest

from lcbc import envs, evalviz
from lcbc.certificate import BarrierNet
from lcbc.config import RenderConfig
from lcbc.encoder import EncoderGeometry, build_encoder
from lcbc.envs import EnvParams, Environment, PendulumState
from lcbc.evalviz import DecreaseCheck, EvaluationError, SignAccuracy
from lcbc.schemas import GridSpec

SMALL_RENDER = EnvParams(render=RenderConfig(width=16, height=16))


def test_sign_accuracy_examples() -> None:
    signs = evalviz.sign_accuracy(np.array([-1.0, 0.0, 0.5, -0.2]), np.array([0.3, -0.1]))
    assert signs.safe_accuracy == pytest.approx(0.75)
    assert signs.unsafe_accuracy == pytest.approx(0.5)
    assert (signs.safe_count, signs.unsafe_count) == (4, 2)
    with pytest.raises(EvaluationError, match="safe and unsafe"):
        evalviz.sign_accuracy(np.zeros(0), np.ones(3))


def test_equal_barrier_values_do_not_violate_decrease() -> None:
    flags = evalviz.decrease_violations(np.array([0.1, 0.1, 0.1]), np.array([0.1, 0.2, 0.0]))
    assert flags.tolist() == [False, True, False]


def test_reference_rollouts_from_safe_starts_stay_safe() -> None:
    env = Environment("pendulum")
    starts = evalviz.sample_starts(env, "safe", 10, seed=0)
    result = evalviz.rollout_safety(evalviz.reference_controller(env), env, starts, 60)
    assert result.trajectories.shape == (10, 61, 2)
    assert result.actions.shape == (10, 60)
    assert (result.starts, result.steps) == (10, 60)
    assert result.safety_rate == 1.0
    assert result.goal_rate is None
    assert evalviz.attraction_rate(result) == 1.0
    assert evalviz.summarize(result, "reference", "safe").safety_rate == 1.0


def test_rollouts_starting_unsafe_count_as_violations() -> None:
    env = Environment("pendulum")
    starts = [PendulumState(math.pi, 0.0), PendulumState(0.0, 0.0)]
    idle = evalviz.rollout_safety(lambda states: np.zeros(len(states)), env, starts, 5)
    assert idle.safety_rate == pytest.approx(0.5)
    with pytest.raises(EvaluationError, match="at least one start"):
        evalviz.rollout_safety(lambda states: np.zeros(len(states)), env, [], 5)


def test_start_sampling_is_seeded() -> None:
    env = Environment("dubins")
    first = evalviz.sample_starts(env, "neither", 5, seed=7)
    again = evalviz.sample_starts(env, "neither", 5, seed=7)
    assert first == again
    assert all(env.label(state) is envs.SafetyLabel.neither for state in first)


def test_dubins_rollouts_report_goal_rate_and_csv(tmp_path: Path) -> None:
    env = Environment("dubins")
    starts = evalviz.sample_starts(env, "safe", 4, seed=1)
    runs = evalviz.compare_trajectories(
        evalviz.reference_controller(env), evalviz.reference_controller(env), env, starts, 20
    )
    assert runs["learned"].trajectories.tobytes() == runs["reference"].trajectories.tobytes()
    assert 0.0 <= runs["learned"].goal_rate <= 1.0

    path = evalviz.write_trajectories_csv(tmp_path / "viz" / "trajectories.csv", "dubins", runs)
    rows = path.read_text(encoding="utf-8").splitlines()
    assert rows[0] == "policy,rollout,step,x,y,theta,label"
    assert len(rows) == 1 + 2 * 4 * 21
    assert rows[1].startswith("learned,0,0,")


def test_grid_states_vary_first_axis_fastest() -> None:
    env = Environment("pendulum")
    grid = GridSpec(resolution=3, first_range=(-1.0, 1.0), second_range=(0.0, 2.0))
    states = evalviz.grid_states(env, grid)
    assert states.shape == (9, 2)
    assert states[:3, 0].tolist() == [-1.0, 0.0, 1.0]
    assert states[:3, 1].tolist() == [0.0, 0.0, 0.0]
    assert states[3, 1] == 1.0

    dubins = Environment("dubins")
    default = evalviz.default_grid(dubins, 4, dubins_theta=0.5)
    assert default.first_range == (-1.5, 1.5)
    assert np.all(evalviz.grid_states(dubins, default)[:, 2] == 0.5)
    assert evalviz.default_grid(env, 4).second_range == (-3.5, 3.5)


def test_label_agreement_ignores_neither_cells() -> None:
    safe, unsafe, neither = evalviz.SAFE, evalviz.UNSAFE, envs.LABEL_CODES[envs.SafetyLabel.neither]
    labels = np.array([safe, unsafe, neither, safe])
    values = np.array([-0.5, 0.5, 9.0, 0.2])
    assert evalviz.label_agreement(values, labels) == pytest.approx(2.0 / 3.0)
    with pytest.raises(EvaluationError, match="no labelled cells"):
        evalviz.label_agreement(np.zeros(2), np.array([neither, neither]))


def test_diverging_colours_and_image_orientation() -> None:
    colours = evalviz.diverging_colours(np.array([-2.0, 0.0, 2.0]))
    assert colours[0].tolist() == [40, 80, 200]
    assert colours[1].tolist() == [255, 255, 255]
    assert colours[2].tolist() == [200, 40, 40]
    assert evalviz.diverging_colours(np.zeros(2)).tolist() == [[255, 255, 255]] * 2

    values = np.array([[-1.0, -1.0], [1.0, 1.0]])
    image = evalviz.heatmap_image(values, cell=3)
    assert image.shape == (6, 6, 3)
    # Second row of values (larger second-axis coordinate) is drawn on top.
    assert image[0, 0].tolist() == [200, 40, 40]
    assert image[-1, -1].tolist() == [40, 80, 200]


def test_heatmap_csv_round_trip(tmp_path: Path) -> None:
    states = np.array([[0.0, 0.0], [math.pi, 0.0]])
    labels = envs.label_grid("pendulum", states)
    values = np.array([-0.25, 0.75], dtype=np.float32)
    path = evalviz.write_heatmap_csv(tmp_path / "heatmap.csv", "pendulum", states, labels, values)
    assert path.read_text(encoding="utf-8").splitlines()[0] == "theta,theta_dot,label,b"
    read_states, read_labels, read_values = evalviz.read_heatmap_csv(path)
    assert np.array_equal(read_states, states)
    assert np.array_equal(read_labels, labels)
    assert np.array_equal(read_values, values)


def test_export_heatmap_writes_csv_and_ppm(tmp_path: Path) -> None:
    env = Environment("pendulum", SMALL_RENDER)
    encoder = build_encoder(EncoderGeometry(height=16, width=16, patch=4, embed_dim=8, depth=0, heads=2), seed=0)
    barrier = BarrierNet(8, [8], np.random.default_rng(0))
    grid = evalviz.default_grid(env, 6)
    heatmap = evalviz.export_heatmap(barrier, encoder.freeze(), env, grid, tmp_path, workers=2)
    assert heatmap.image.shape == (6, 6)
    assert 0.0 <= heatmap.agreement <= 1.0
    assert [path.name for path in heatmap.paths] == ["heatmap.csv", "heatmap.ppm"]
    assert envs.read_ppm(tmp_path / "heatmap.ppm").shape == (24, 24, 3)
    assert len((tmp_path / "heatmap.csv").read_text(encoding="utf-8").splitlines()) == 37


def test_pca_recovers_dominant_axes() -> None:
    rng = np.random.default_rng(0)
    data = np.zeros((400, 3))
    data[:, 0] = rng.normal(scale=3.0, size=400)
    data[:, 1] = rng.normal(scale=1.0, size=400)
    data[:, 2] = rng.normal(scale=0.1, size=400)
    projection = evalviz.pca_projection(data)
    assert projection.coords.shape == (400, 2)
    assert abs(projection.components[0, 0]) == pytest.approx(1.0, abs=1e-2)
    assert abs(projection.components[1, 1]) == pytest.approx(1.0, abs=1e-2)
    assert projection.explained_variance[0] > projection.explained_variance[1]
    assert projection.components[0, np.argmax(np.abs(projection.components[0]))] > 0
    assert np.allclose(evalviz.pca_projection(data).coords, projection.coords)


def test_pca_matches_dense_eigendecomposition() -> None:
    data = np.random.default_rng(4).normal(size=(10, 5))
    projection = evalviz.pca_projection(data, max_iter=20_000)
    centred = data - data.mean(axis=0)
    values, vectors = np.linalg.eigh(centred.T @ centred / 9)
    for rank in range(2):
        expected = vectors[:, -1 - rank]
        if expected[np.argmax(np.abs(expected))] < 0:
            expected = -expected
        assert np.allclose(projection.components[rank], expected, atol=1e-4)
        assert projection.explained_variance[rank] == pytest.approx(values[-1 - rank], rel=1e-4)


def test_pca_warns_on_rank_deficient_input(tmp_path: Path) -> None:
    line = np.linspace(-1.0, 1.0, 20)
    data = np.stack([line, 2.0 * line], axis=1)
    with pytest.warns(RuntimeWarning, match="rank deficient"):
        projection = evalviz.pca_projection(data)
    assert projection.components.shape == (1, 2)
    path = evalviz.write_pca_csv(tmp_path / "pca.csv", projection.coords, np.zeros(20, dtype=np.int64))
    rows = path.read_text(encoding="utf-8").splitlines()
    assert rows[0] == "pc1,pc2,label"
    assert rows[1].split(",")[1] == "0.0"
    with pytest.raises(EvaluationError, match="at least 3 samples"):
        evalviz.pca_projection(np.zeros((2, 4)))


def test_linear_probe_separates_separable_classes() -> None:
    rng = np.random.default_rng(0)
    features = rng.normal(size=(200, 4))
    positive = features[:, 0] + 0.5 * features[:, 1] > 0
    assert evalviz.linear_probe_accuracy(features, positive, seed=0) >= 0.9
    with pytest.raises(EvaluationError, match="both classes"):
        evalviz.linear_probe_accuracy(features, np.ones(200, dtype=bool))


def test_verification_report_is_written_as_json(tmp_path: Path) -> None:
    env = Environment("pendulum")
    starts = evalviz.sample_starts(env, "safe", 3, seed=0)
    result = evalviz.rollout_safety(evalviz.reference_controller(env), env, starts, 10)
    report = evalviz.write_verification_report(
        tmp_path / "reports" / "verification.json",
        env=env,
        seed=0,
        signs=SignAccuracy(safe_accuracy=0.9, unsafe_accuracy=1.0, safe_count=10, unsafe_count=5),
        decrease=DecreaseCheck(samples=20, latent_violation_rate=0.1, ground_truth_violation_rate=0.15, agreement=0.95),
        rollouts=[evalviz.summarize(result, "reference", "safe")],
        attraction=None,
    )
    payload = json.loads((tmp_path / "reports" / "verification.json").read_text(encoding="utf-8"))
    assert payload["safe_accuracy"] == 0.9
    assert payload["rollouts"][0]["policy"] == "reference"
    assert report.decrease_samples == 20
