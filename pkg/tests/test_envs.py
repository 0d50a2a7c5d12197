from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from lcbc import envs
from lcbc.config import DubinsConfig, PendulumConfig, RenderConfig
from lcbc.envs import (
    DubinsState,
    EnvError,
    EnvParams,
    Environment,
    LABEL_CODES,
    PendulumState,
    SafetyLabel,
)

PARAMS = EnvParams()


def test_pendulum_step_examples() -> None:
    assert envs.pendulum_step(PendulumState(0.0, 0.0), 0.0, PARAMS) == PendulumState(0.0, 0.0)

    moved = envs.pendulum_step(PendulumState(0.1, 0.0), 0.0, PARAMS)
    assert moved.theta == pytest.approx(0.1)
    assert moved.theta_dot == pytest.approx(0.0499167, abs=1e-7)

    drift = envs.pendulum_step(PendulumState(0.0, 1.0), 0.0, PARAMS)
    assert drift.theta == pytest.approx(0.05)
    # sin(0) = 0: no gravity torque, velocity carries over unchanged.
    assert drift.theta_dot == pytest.approx(1.0)


def test_dubins_step_examples() -> None:
    straight = envs.dubins_step(DubinsState(0.0, 0.0, 0.0), 0.0, PARAMS)
    assert (straight.x, straight.y, straight.theta) == pytest.approx((0.1, 0.0, 0.0))
    up = envs.dubins_step(DubinsState(0.0, 0.0, math.pi / 2), 0.0, PARAMS)
    assert (up.x, up.y, up.theta) == pytest.approx((0.0, 0.1, math.pi / 2))
    turning = envs.dubins_step(DubinsState(0.0, 0.0, 0.0), 1.0, PARAMS)
    assert (turning.x, turning.y, turning.theta) == pytest.approx((0.1, 0.0, 0.1))


def test_steps_wrap_clamp_and_reject_non_finite() -> None:
    wrapped = envs.pendulum_step(PendulumState(math.pi - 0.01, 1.0), 0.0, PARAMS)
    assert -math.pi <= wrapped.theta <= math.pi
    fast = envs.pendulum_step(PendulumState(0.0, 3.5), 6.0, PARAMS)
    assert fast.theta_dot == pytest.approx(3.5)
    with pytest.warns(RuntimeWarning, match="clamped"):
        clamped = envs.pendulum_step(PendulumState(0.0, 0.0), 100.0, PARAMS)
    assert clamped.theta_dot == pytest.approx(6.0 * 0.05)
    with pytest.raises(EnvError, match="non-finite"):
        envs.dubins_step(DubinsState(float("nan"), 0.0, 0.0), 0.0, PARAMS)
    edge = envs.dubins_step(DubinsState(1.5, 0.0, 0.0), 0.0, PARAMS)
    assert edge.x == pytest.approx(1.5)


def test_pendulum_falls_and_gains_energy_near_hanging() -> None:
    cfg = PARAMS.pendulum

    def energy(s: PendulumState) -> float:
        return 0.5 * s.theta_dot**2 + (cfg.gravity / cfg.length) * math.cos(s.theta)

    state = PendulumState(math.pi - 0.01, 0.0)
    speeds = [abs(state.theta_dot)]
    energies = [energy(state)]
    for _ in range(5):
        state = envs.pendulum_step(state, 0.0, PARAMS)
        speeds.append(abs(state.theta_dot))
        energies.append(energy(state))
    assert all(later > earlier for earlier, later in zip(speeds, speeds[1:]))
    # Explicit Euler pumps energy into the swing around the stable point.
    assert energies[-1] > energies[0]


def test_dubins_without_steering_keeps_a_straight_line() -> None:
    params = EnvParams(dubins=DubinsConfig(speed=0.1))
    state = DubinsState(-0.5, -1.2, 0.3)
    heading = state.theta

    def offset(s: DubinsState) -> float:
        return s.y * math.cos(heading) - s.x * math.sin(heading)

    start = offset(state)
    for _ in range(100):
        state = envs.dubins_step(state, 0.0, params)
        assert offset(state) == pytest.approx(start, abs=1e-9)
        assert state.theta == pytest.approx(heading, abs=1e-12)
    assert abs(state.x) < params.dubins.box and abs(state.y) < params.dubins.box
    assert state.x == pytest.approx(-0.5 + 10.0 * math.cos(heading) * 0.1)


def _label_grid_states(env: str) -> np.ndarray:
    if env == "pendulum":
        cfg = PARAMS.pendulum
        axes = [np.linspace(-math.pi, math.pi, 100), np.linspace(-cfg.theta_dot_limit, cfg.theta_dot_limit, 100)]
    else:
        box = PARAMS.dubins.box
        axes = [np.linspace(-box, box, 25), np.linspace(-box, box, 25), np.linspace(-math.pi, math.pi, 16)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([axis.ravel() for axis in mesh], axis=1)


@pytest.mark.parametrize("env", ["pendulum", "dubins"])
def test_safe_and_unsafe_never_overlap_on_dense_grid(env: str) -> None:
    states = _label_grid_states(env)
    assert states.shape[0] == 10_000
    codes = envs.label_grid(env, states)
    assert set(np.unique(codes).tolist()) <= set(LABEL_CODES.values())

    facade = Environment(env)
    per_state = np.array([LABEL_CODES[envs.label(facade.state_from_array(row))] for row in states])
    assert np.array_equal(per_state, codes)
    again = np.array([LABEL_CODES[envs.label(facade.state_from_array(row))] for row in states])
    assert np.array_equal(again, per_state)

    safe = codes == LABEL_CODES[SafetyLabel.safe]
    unsafe = codes == LABEL_CODES[SafetyLabel.unsafe]
    assert safe.any() and unsafe.any()
    assert not (safe & unsafe).any()


def test_render_is_deterministic_and_state_dependent() -> None:
    upright = envs.render(PendulumState(0.0, 0.0), PARAMS)
    assert upright.shape == (64, 64, 3)
    assert upright.dtype == np.uint8
    assert upright.nbytes == 12288
    assert upright.tobytes() == envs.render(PendulumState(0.0, 0.0), PARAMS).tobytes()

    hanging = envs.render(PendulumState(math.pi, 0.0), PARAMS)
    differing = np.any(upright != hanging, axis=2).mean()
    assert differing > 0.01

    car = envs.render(DubinsState(1.0, -1.0, 0.3), PARAMS)
    other = envs.render(DubinsState(-1.0, 1.0, 0.3), PARAMS)
    assert np.any(car != other)


def test_render_respects_configured_size() -> None:
    params = EnvParams(render=RenderConfig(width=32, height=48))
    assert envs.render(DubinsState(0.0, 0.0, 0.0), params).shape == (48, 32, 3)


@pytest.mark.parametrize(
    ("state", "expected"),
    [
        (PendulumState(0.0, 0.0), SafetyLabel.safe),
        (PendulumState(math.pi, 0.0), SafetyLabel.unsafe),
        (PendulumState(0.3, 0.5), SafetyLabel.neither),
        (PendulumState(0.0, 2.0), SafetyLabel.unsafe),
        (DubinsState(0.8, 0.0, 1.0), SafetyLabel.neither),
        (DubinsState(0.0, 0.0, -2.0), SafetyLabel.unsafe),
        (DubinsState(1.2, 1.2, 0.0), SafetyLabel.safe),
    ],
)
def test_labels(state, expected: SafetyLabel) -> None:
    assert envs.label(state) is expected
    codes = envs.label_grid(envs.kind_of(state), state.as_array()[None, :])
    assert codes[0] == LABEL_CODES[expected]


def test_label_rejects_wrong_env() -> None:
    with pytest.raises(EnvError, match="does not belong"):
        envs.label(PendulumState(0.0, 0.0), "dubins")


def test_reference_policy_examples() -> None:
    assert envs.reference_policy(PendulumState(0.0, 0.0), "pendulum") == 0.0
    low_gains = EnvParams(pendulum=PendulumConfig(kp=8.0, kd=2.0))
    assert envs.reference_policy(PendulumState(0.1, 0.0), "pendulum", low_gains) == pytest.approx(-0.8)
    assert envs.reference_policy(PendulumState(0.1, -0.5), "pendulum") == pytest.approx(-20.0 * 0.1 + 4.0 * 0.5)
    assert envs.reference_policy(PendulumState(3.0, 0.0), "pendulum") == pytest.approx(-6.0)
    bearing = math.atan2(1.2 - 0.0, 1.2 - 0.0)
    assert envs.reference_policy(DubinsState(0.0, 0.0, bearing), "dubins") == pytest.approx(0.0, abs=1e-12)
    assert envs.reference_policy(DubinsState(0.0, 0.0, bearing - 0.1), "dubins") == pytest.approx(0.3)


def test_reached_goal_uses_goal_radius() -> None:
    assert envs.reached_goal(DubinsState(1.2, 1.2, 0.0), PARAMS)
    assert envs.reached_goal(DubinsState(1.2, 1.05, 0.0), PARAMS)
    assert not envs.reached_goal(DubinsState(1.2, 0.9, 0.0), PARAMS)


def test_proprio_examples() -> None:
    assert envs.proprio(PendulumState(0.5, -1.2)).tolist() == pytest.approx([-1.2])
    assert envs.proprio(DubinsState(0.0, 0.0, 0.7)).tolist() == pytest.approx([0.7])
    assert envs.PROPRIO_DIM == 1


@pytest.mark.parametrize("env", ["pendulum", "dubins"])
@pytest.mark.parametrize("region", ["safe", "unsafe", "neither"])
def test_region_sampling_lands_in_region(env: str, region: str) -> None:
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert envs.sample_state(env, region, rng, PARAMS).__class__ is (
            PendulumState if env == "pendulum" else DubinsState
        )
    rng = np.random.default_rng(1)
    samples = np.stack([envs.sample_state(env, region, rng, PARAMS).as_array() for _ in range(50)])
    assert np.all(envs.label_grid(env, samples) == LABEL_CODES[SafetyLabel(region)])


def test_environment_facade() -> None:
    env = Environment("dubins", EnvParams(dubins=DubinsConfig(turn_limit=1.0)))
    assert env.state_dim == 3
    assert env.action_bounds == (-1.0, 1.0)
    state = env.state_from_array(np.array([0.2, 0.3, 0.0]))
    assert env.step(state, 0.0).x == pytest.approx(0.3)
    with pytest.raises(EnvError, match="needs 3 values"):
        env.state_from_array(np.zeros(2))
    with pytest.raises(EnvError):
        env.step(PendulumState(0.0, 0.0), 0.0)


def test_ppm_round_trip(tmp_path: Path) -> None:
    frame = envs.render(PendulumState(0.4, 0.0), PARAMS)
    path = envs.write_ppm(tmp_path / "viz" / "frame.ppm", frame)
    assert path.read_bytes().startswith(b"P6\n64 64\n255\n")
    assert np.array_equal(envs.read_ppm(path), frame)
    with pytest.raises(EnvError):
        envs.write_ppm(tmp_path / "bad.ppm", frame.astype(np.float32))
