"""Pendulum and Dubins-car simulators, renderers, safety labels and reference controllers."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Literal

import numpy as np

from lcbc.config import DubinsConfig, EnvKind, PendulumConfig, RenderConfig, Settings

logger = logging.getLogger("lcbc.envs")

PENDULUM_SAFE_THETA = math.pi / 12
PENDULUM_SAFE_THETA_DOT = 0.25
PENDULUM_KEEP_THETA = math.pi / 2
PENDULUM_KEEP_THETA_DOT = 1.5
DUBINS_UNSAFE_HALF_WIDTH = 0.7
DUBINS_SAFE_HALF_WIDTH = 0.9

Region = Literal["all", "safe", "unsafe", "neither"]

_BACKGROUND = (255, 255, 255)
_ROD_COLOUR = (204, 77, 77)
_PIVOT_COLOUR = (30, 30, 30)
_OBSTACLE_COLOUR = (60, 60, 60)
_GOAL_COLOUR = (40, 170, 60)
_AGENT_COLOUR = (40, 80, 220)


class EnvError(ValueError):
    pass


class SafetyLabel(str, Enum):
    safe = "safe"
    unsafe = "unsafe"
    neither = "neither"


LABEL_CODES: dict[SafetyLabel, int] = {SafetyLabel.safe: 0, SafetyLabel.unsafe: 1, SafetyLabel.neither: 2}


@dataclass(frozen=True, slots=True)
class PendulumState:
    theta: float
    theta_dot: float

    def as_array(self) -> np.ndarray:
        return np.array([self.theta, self.theta_dot], dtype=np.float32)


@dataclass(frozen=True, slots=True)
class DubinsState:
    x: float
    y: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=np.float32)


EnvState = PendulumState | DubinsState


@dataclass(frozen=True, slots=True)
class EnvParams:
    pendulum: PendulumConfig = field(default_factory=PendulumConfig)
    dubins: DubinsConfig = field(default_factory=DubinsConfig)
    render: RenderConfig = field(default_factory=RenderConfig)

    @classmethod
    def from_settings(cls, settings: Settings) -> EnvParams:
        return cls(pendulum=settings.pendulum, dubins=settings.dubins, render=settings.render)

    def action_bounds(self, env: EnvKind) -> tuple[float, float]:
        if env == "pendulum":
            return -self.pendulum.torque_limit, self.pendulum.torque_limit
        return -self.dubins.turn_limit, self.dubins.turn_limit


STATE_DIMS: dict[str, int] = {"pendulum": 2, "dubins": 3}
PROPRIO_DIM = 1
ACTION_DIM = 1


def wrap_angle(angle: float) -> float:
    if -math.pi <= angle <= math.pi:
        return angle
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


def _require_finite(op: str, *values: float) -> None:
    if not all(math.isfinite(v) for v in values):
        raise EnvError(f"{op}: non-finite input {values}")


def _clamp_action(op: str, u: float, low: float, high: float) -> float:
    if u < low or u > high:
        clamped = min(max(u, low), high)
        logger.debug("action_clamped op=%s requested=%s applied=%s", op, u, clamped)
        warnings.warn(f"{op}: action {u:.4f} outside [{low}, {high}], clamped to {clamped:.4f}", RuntimeWarning)
        return clamped
    return u


def pendulum_step(s: PendulumState, u: float, p: EnvParams) -> PendulumState:
    cfg = p.pendulum
    _require_finite("pendulum_step", s.theta, s.theta_dot, u)
    u = _clamp_action("pendulum_step", float(u), -cfg.torque_limit, cfg.torque_limit)
    theta = s.theta + s.theta_dot * cfg.dt
    accel = (cfg.gravity / cfg.length) * math.sin(s.theta) + u / (cfg.mass * cfg.length**2)
    theta_dot = s.theta_dot + accel * cfg.dt
    theta_dot = min(max(theta_dot, -cfg.theta_dot_limit), cfg.theta_dot_limit)
    return PendulumState(theta=wrap_angle(theta), theta_dot=theta_dot)


def dubins_step(s: DubinsState, u: float, p: EnvParams) -> DubinsState:
    cfg = p.dubins
    _require_finite("dubins_step", s.x, s.y, s.theta, u)
    u = _clamp_action("dubins_step", float(u), -cfg.turn_limit, cfg.turn_limit)
    x = s.x + cfg.speed * math.cos(s.theta) * cfg.dt
    y = s.y + cfg.speed * math.sin(s.theta) * cfg.dt
    theta = s.theta + u * cfg.dt
    x = min(max(x, -cfg.box), cfg.box)
    y = min(max(y, -cfg.box), cfg.box)
    return DubinsState(x=x, y=y, theta=wrap_angle(theta))


def step(s: EnvState, u: float, p: EnvParams) -> EnvState:
    if isinstance(s, PendulumState):
        return pendulum_step(s, u, p)
    return dubins_step(s, u, p)


def kind_of(s: EnvState) -> EnvKind:
    return "pendulum" if isinstance(s, PendulumState) else "dubins"


def _check_kind(s: EnvState, env: EnvKind | None) -> EnvKind:
    kind = kind_of(s)
    if env is not None and env != kind:
        raise EnvError(f"state {s!r} does not belong to env `{env}`")
    return kind


@lru_cache(maxsize=8)
def _pixel_centres(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.mgrid[0:height, 0:width]
    return rows.astype(np.float64) + 0.5, cols.astype(np.float64) + 0.5


def _segment_distance(px: np.ndarray, py: np.ndarray, a: tuple[float, float], b: tuple[float, float]) -> np.ndarray:
    ax, ay = a
    dx, dy = b[0] - ax, b[1] - ay
    length_sq = dx * dx + dy * dy
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / length_sq, 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def _render_pendulum(s: PendulumState, p: EnvParams) -> np.ndarray:
    height, width = p.render.height, p.render.width
    rows, cols = _pixel_centres(height, width)
    frame = np.empty((height, width, 3), dtype=np.uint8)
    frame[:] = _BACKGROUND
    cx, cy = width / 2.0, height / 2.0
    rod = 0.42 * min(height, width)
    # theta = 0 is upright; image rows grow downwards.
    tip = (cx + rod * math.sin(s.theta), cy - rod * math.cos(s.theta))
    distance = _segment_distance(cols, rows, (cx, cy), tip)
    frame[distance <= p.pendulum.rod_width_px / 2.0] = _ROD_COLOUR
    pivot = np.hypot(cols - cx, rows - cy) <= max(1.0, p.pendulum.rod_width_px / 2.0)
    frame[pivot] = _PIVOT_COLOUR
    return frame


def _world_to_pixel(x: float, y: float, p: EnvParams) -> tuple[float, float]:
    box = p.dubins.box
    col = (x + box) / (2.0 * box) * p.render.width
    row = (box - y) / (2.0 * box) * p.render.height
    return col, row


def _render_dubins(s: DubinsState, p: EnvParams) -> np.ndarray:
    height, width = p.render.height, p.render.width
    rows, cols = _pixel_centres(height, width)
    frame = np.empty((height, width, 3), dtype=np.uint8)
    frame[:] = _BACKGROUND
    scale = width / (2.0 * p.dubins.box)

    ox, oy = _world_to_pixel(0.0, 0.0, p)
    frame[np.hypot(cols - ox, rows - oy) <= p.dubins.obstacle_radius * scale] = _OBSTACLE_COLOUR

    gx, gy = _world_to_pixel(p.dubins.goal_x, p.dubins.goal_y, p)
    goal_half = max(1.0, 0.08 * scale)
    frame[(np.abs(cols - gx) <= goal_half) & (np.abs(rows - gy) <= goal_half)] = _GOAL_COLOUR

    size = 0.18
    vertices = [
        (s.x + size * math.cos(s.theta), s.y + size * math.sin(s.theta)),
        (s.x + 0.7 * size * math.cos(s.theta + 2.5), s.y + 0.7 * size * math.sin(s.theta + 2.5)),
        (s.x + 0.7 * size * math.cos(s.theta - 2.5), s.y + 0.7 * size * math.sin(s.theta - 2.5)),
    ]
    (x0, y0), (x1, y1), (x2, y2) = (_world_to_pixel(vx, vy, p) for vx, vy in vertices)
    d0 = (x1 - x0) * (rows - y0) - (y1 - y0) * (cols - x0)
    d1 = (x2 - x1) * (rows - y1) - (y2 - y1) * (cols - x1)
    d2 = (x0 - x2) * (rows - y2) - (y0 - y2) * (cols - x2)
    inside = ((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))
    frame[inside] = _AGENT_COLOUR
    return frame


def render(s: EnvState, p: EnvParams) -> np.ndarray:
    """Deterministic RGB rasterisation, shape (height, width, 3), dtype uint8."""
    if isinstance(s, PendulumState):
        _require_finite("render", s.theta, s.theta_dot)
        return _render_pendulum(s, p)
    _require_finite("render", s.x, s.y, s.theta)
    return _render_dubins(s, p)


def label(s: EnvState, env: EnvKind | None = None) -> SafetyLabel:
    kind = _check_kind(s, env)
    if kind == "pendulum":
        assert isinstance(s, PendulumState)
        if abs(s.theta) <= PENDULUM_SAFE_THETA and abs(s.theta_dot) <= PENDULUM_SAFE_THETA_DOT:
            return SafetyLabel.safe
        if abs(s.theta) <= PENDULUM_KEEP_THETA and abs(s.theta_dot) <= PENDULUM_KEEP_THETA_DOT:
            return SafetyLabel.neither
        return SafetyLabel.unsafe
    assert isinstance(s, DubinsState)
    if abs(s.x) <= DUBINS_UNSAFE_HALF_WIDTH and abs(s.y) <= DUBINS_UNSAFE_HALF_WIDTH:
        return SafetyLabel.unsafe
    if abs(s.x) <= DUBINS_SAFE_HALF_WIDTH and abs(s.y) <= DUBINS_SAFE_HALF_WIDTH:
        return SafetyLabel.neither
    return SafetyLabel.safe


def reference_policy(s: EnvState, env: EnvKind | None = None, p: EnvParams | None = None) -> float:
    """PD controller for the pendulum, P controller on the goal bearing for Dubins."""
    kind = _check_kind(s, env)
    p = p or EnvParams()
    if kind == "pendulum":
        assert isinstance(s, PendulumState)
        cfg = p.pendulum
        u = -cfg.kp * s.theta - cfg.kd * s.theta_dot
        return min(max(u, -cfg.torque_limit), cfg.torque_limit)
    assert isinstance(s, DubinsState)
    cfg_d = p.dubins
    bearing = math.atan2(cfg_d.goal_y - s.y, cfg_d.goal_x - s.x)
    u = cfg_d.k_theta * wrap_angle(bearing - s.theta)
    return min(max(u, -cfg_d.turn_limit), cfg_d.turn_limit)


def proprio(s: EnvState, env: EnvKind | None = None) -> np.ndarray:
    kind = _check_kind(s, env)
    if kind == "pendulum":
        assert isinstance(s, PendulumState)
        return np.array([s.theta_dot], dtype=np.float32)
    assert isinstance(s, DubinsState)
    return np.array([s.theta], dtype=np.float32)


def reached_goal(s: DubinsState, p: EnvParams) -> bool:
    return math.hypot(s.x - p.dubins.goal_x, s.y - p.dubins.goal_y) <= p.dubins.goal_radius


def state_from_array(env: EnvKind, values: np.ndarray) -> EnvState:
    values = [float(v) for v in np.asarray(values).reshape(-1)]
    if len(values) != STATE_DIMS[env]:
        raise EnvError(f"{env} state needs {STATE_DIMS[env]} values, got {len(values)}")
    if env == "pendulum":
        return PendulumState(theta=values[0], theta_dot=values[1])
    return DubinsState(x=values[0], y=values[1], theta=values[2])


def _uniform_state(env: EnvKind, rng: np.random.Generator, p: EnvParams) -> EnvState:
    if env == "pendulum":
        limit = p.pendulum.theta_dot_limit
        return PendulumState(theta=float(rng.uniform(-math.pi, math.pi)), theta_dot=float(rng.uniform(-limit, limit)))
    box = p.dubins.box
    return DubinsState(
        x=float(rng.uniform(-box, box)),
        y=float(rng.uniform(-box, box)),
        theta=float(rng.uniform(-math.pi, math.pi)),
    )


def sample_state(env: EnvKind, region: Region, rng: np.random.Generator, p: EnvParams) -> EnvState:
    """Uniform sample from the full domain or one labelled region (rejection sampling)."""
    if region == "all":
        return _uniform_state(env, rng, p)
    if env == "pendulum" and region == "safe":
        return PendulumState(
            theta=float(rng.uniform(-PENDULUM_SAFE_THETA, PENDULUM_SAFE_THETA)),
            theta_dot=float(rng.uniform(-PENDULUM_SAFE_THETA_DOT, PENDULUM_SAFE_THETA_DOT)),
        )
    if env == "dubins" and region == "unsafe":
        half = DUBINS_UNSAFE_HALF_WIDTH
        return DubinsState(
            x=float(rng.uniform(-half, half)),
            y=float(rng.uniform(-half, half)),
            theta=float(rng.uniform(-math.pi, math.pi)),
        )
    wanted = SafetyLabel(region)
    for _ in range(10_000):
        candidate = _uniform_state(env, rng, p)
        if label(candidate, env) == wanted:
            return candidate
    raise EnvError(f"could not sample a `{region}` state for {env} after 10000 draws")


def label_grid(env: EnvKind, states: np.ndarray) -> np.ndarray:
    """Vectorised label codes (see LABEL_CODES) for an (n, state_dim) array."""
    states = np.asarray(states, dtype=np.float64)
    codes = np.full(states.shape[0], LABEL_CODES[SafetyLabel.neither], dtype=np.int64)
    if env == "pendulum":
        theta, theta_dot = np.abs(states[:, 0]), np.abs(states[:, 1])
        safe = (theta <= PENDULUM_SAFE_THETA) & (theta_dot <= PENDULUM_SAFE_THETA_DOT)
        keep = (theta <= PENDULUM_KEEP_THETA) & (theta_dot <= PENDULUM_KEEP_THETA_DOT)
        codes[safe] = LABEL_CODES[SafetyLabel.safe]
        codes[~keep] = LABEL_CODES[SafetyLabel.unsafe]
    else:
        x, y = np.abs(states[:, 0]), np.abs(states[:, 1])
        unsafe = (x <= DUBINS_UNSAFE_HALF_WIDTH) & (y <= DUBINS_UNSAFE_HALF_WIDTH)
        inner = (x <= DUBINS_SAFE_HALF_WIDTH) & (y <= DUBINS_SAFE_HALF_WIDTH)
        codes[~inner] = LABEL_CODES[SafetyLabel.safe]
        codes[unsafe] = LABEL_CODES[SafetyLabel.unsafe]
    return codes


@dataclass(frozen=True, slots=True)
class Environment:
    """An env kind bound to its parameters."""

    kind: EnvKind
    params: EnvParams = field(default_factory=EnvParams)

    @classmethod
    def from_settings(cls, settings: Settings) -> Environment:
        return cls(kind=settings.env, params=EnvParams.from_settings(settings))

    @property
    def state_dim(self) -> int:
        return STATE_DIMS[self.kind]

    @property
    def action_bounds(self) -> tuple[float, float]:
        return self.params.action_bounds(self.kind)

    def step(self, s: EnvState, u: float) -> EnvState:
        _check_kind(s, self.kind)
        return step(s, u, self.params)

    def render(self, s: EnvState) -> np.ndarray:
        return render(s, self.params)

    def label(self, s: EnvState) -> SafetyLabel:
        return label(s, self.kind)

    def reference_action(self, s: EnvState) -> float:
        return reference_policy(s, self.kind, self.params)

    def proprio(self, s: EnvState) -> np.ndarray:
        return proprio(s, self.kind)

    def sample(self, region: Region, rng: np.random.Generator) -> EnvState:
        return sample_state(self.kind, region, rng, self.params)

    def state_from_array(self, values: np.ndarray) -> EnvState:
        return state_from_array(self.kind, values)


def write_ppm(path: Path, frame: np.ndarray) -> Path:
    frame = np.asarray(frame)
    if frame.dtype != np.uint8 or frame.ndim != 3 or frame.shape[2] != 3:
        raise EnvError(f"PPM export needs an (h, w, 3) uint8 frame, got {frame.shape} {frame.dtype}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P6\n{frame.shape[1]} {frame.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + np.ascontiguousarray(frame).tobytes())
    return path


def read_ppm(path: Path) -> np.ndarray:
    payload = Path(path).read_bytes()
    tokens: list[bytes] = []
    offset = 0
    while len(tokens) < 4:
        while offset < len(payload) and payload[offset : offset + 1].isspace():
            offset += 1
        if payload[offset : offset + 1] == b"#":
            offset = payload.index(b"\n", offset) + 1
            continue
        start = offset
        while offset < len(payload) and not payload[offset : offset + 1].isspace():
            offset += 1
        tokens.append(payload[start:offset])
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise EnvError(f"{path}: not an 8-bit binary PPM")
    width, height = int(tokens[1]), int(tokens[2])
    body = payload[offset + 1 : offset + 1 + width * height * 3]
    if len(body) != width * height * 3:
        raise EnvError(f"{path}: truncated PPM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3).copy()
