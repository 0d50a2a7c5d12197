"""Empirical checks of the certificate conditions and CSV/PPM artifact export.

CSV schemas (all files start with a header row, floats written with ``repr``):

* ``heatmap.csv``      pendulum: theta,theta_dot,label,b   dubins: x,y,theta,label,b
* ``pca.csv``          pc1,pc2,label
* ``trajectories.csv`` policy,rollout,step,<state columns>,label
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lcbc import envs, ndmath, seeding
from lcbc.certificate import BarrierNet, barrier_value
from lcbc.controller import PolicyNet, act, predicted_next_pooled
from lcbc.encoder import PatchEncoder, pool
from lcbc.envs import LABEL_CODES, EnvState, Environment, SafetyLabel
from lcbc.layers import parameter
from lcbc.ndmath import Adam, Tensor
from lcbc.pipeline import LabeledLatents
from lcbc.schemas import GridSpec, RolloutSummary, VerificationReport
from lcbc.world_model import TransitionModel

logger = logging.getLogger("lcbc.evalviz")

SAFE = LABEL_CODES[SafetyLabel.safe]
UNSAFE = LABEL_CODES[SafetyLabel.unsafe]

Controller = Callable[[list[EnvState]], np.ndarray]


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class SignAccuracy:
    safe_accuracy: float
    unsafe_accuracy: float
    safe_count: int
    unsafe_count: int


def sign_accuracy(b_safe: np.ndarray, b_unsafe: np.ndarray) -> SignAccuracy:
    """Fraction of safe values with B <= 0 and of unsafe values with B > 0."""
    b_safe, b_unsafe = np.asarray(b_safe).reshape(-1), np.asarray(b_unsafe).reshape(-1)
    if b_safe.size == 0 or b_unsafe.size == 0:
        raise EvaluationError(f"sign check needs safe and unsafe samples, got {b_safe.size} and {b_unsafe.size}")
    return SignAccuracy(
        safe_accuracy=float(np.mean(b_safe <= 0)),
        unsafe_accuracy=float(np.mean(b_unsafe > 0)),
        safe_count=int(b_safe.size),
        unsafe_count=int(b_unsafe.size),
    )


def verify_signs(barrier: BarrierNet, latents: LabeledLatents, safe: np.ndarray, unsafe: np.ndarray) -> SignAccuracy:
    pooled = latents.pooled
    empty = np.zeros((0,), dtype=np.float32)
    b_safe = barrier_value(barrier, pooled[safe]) if len(safe) else empty
    b_unsafe = barrier_value(barrier, pooled[unsafe]) if len(unsafe) else empty
    return sign_accuracy(b_safe, b_unsafe)


def decrease_violations(b_now: np.ndarray, b_next: np.ndarray) -> np.ndarray:
    """True where B increased; equality satisfies the non-increase condition."""
    return np.asarray(b_next) > np.asarray(b_now)


@dataclass(frozen=True, slots=True)
class DecreaseCheck:
    samples: int
    latent_violation_rate: float
    ground_truth_violation_rate: float
    agreement: float


def learned_controller(encoder: PatchEncoder, policy: PolicyNet, env: Environment) -> Controller:
    def control(states: list[EnvState]) -> np.ndarray:
        frames = np.stack([env.render(s) for s in states])
        pooled = pool(encoder.encode_batch(frames))
        proprios = np.stack([env.proprio(s) for s in states])
        return act(policy, pooled, proprios)[:, 0]

    return control


def reference_controller(env: Environment) -> Controller:
    return lambda states: np.array([env.reference_action(s) for s in states], dtype=np.float32)


def verify_decrease(
    barrier: BarrierNet,
    policy: PolicyNet,
    model: TransitionModel,
    encoder: PatchEncoder,
    env: Environment,
    latents: LabeledLatents,
    indices: np.ndarray,
    *,
    batch_size: int = 256,
) -> DecreaseCheck:
    """Latent-model and ground-truth violation rates of B(next) <= B(now) under the policy."""
    indices = latents.context_ready(indices)
    if len(indices) == 0:
        raise EvaluationError("no record with a full context window to check the decrease condition on")
    latent_flags, truth_flags = [], []
    for first in range(0, len(indices), batch_size):
        chunk = indices[first : first + batch_size]
        batch = latents.contexts(chunk)
        b_now = barrier_value(barrier, batch.pooled)
        with ndmath.no_grad():
            b_model = barrier(predicted_next_pooled(policy, model, batch)).data
        actions = act(policy, batch.pooled, batch.current_proprios)[:, 0]
        successors = [
            env.step(env.state_from_array(latents.dataset.states[i]), float(a)) for i, a in zip(chunk, actions)
        ]
        next_pooled = pool(encoder.encode_batch(np.stack([env.render(s) for s in successors])))
        b_truth = barrier_value(barrier, next_pooled)
        latent_flags.append(decrease_violations(b_now, b_model))
        truth_flags.append(decrease_violations(b_now, b_truth))
    latent = np.concatenate(latent_flags)
    truth = np.concatenate(truth_flags)
    check = DecreaseCheck(
        samples=int(latent.size),
        latent_violation_rate=float(latent.mean()),
        ground_truth_violation_rate=float(truth.mean()),
        agreement=float(np.mean(latent == truth)),
    )
    logger.info(
        "decrease_check samples=%s latent=%.4f ground_truth=%.4f agreement=%.4f",
        check.samples,
        check.latent_violation_rate,
        check.ground_truth_violation_rate,
        check.agreement,
    )
    return check


@dataclass(slots=True)
class RolloutResult:
    trajectories: np.ndarray
    labels: np.ndarray
    actions: np.ndarray
    safety_rate: float
    goal_rate: float | None = None

    @property
    def starts(self) -> int:
        return int(self.trajectories.shape[0])

    @property
    def steps(self) -> int:
        return int(self.trajectories.shape[1] - 1)


def sample_starts(env: Environment, region: envs.Region, count: int, seed: int) -> list[EnvState]:
    rng = seeding.stream(seed, f"eval.starts.{region}")
    return [env.sample(region, rng) for _ in range(count)]


def rollout_safety(controller: Controller, env: Environment, starts: Sequence[EnvState], steps: int) -> RolloutResult:
    """Closed-loop lockstep rollouts; safety rate = fraction never labelled unsafe."""
    states = list(starts)
    if not states:
        raise EvaluationError("rollout needs at least one start state")
    history = [np.stack([s.as_array() for s in states])]
    applied = []
    for _ in range(steps):
        actions = np.asarray(controller(states), dtype=np.float64).reshape(len(states))
        states = [env.step(s, float(a)) for s, a in zip(states, actions)]
        history.append(np.stack([s.as_array() for s in states]))
        applied.append(actions)
    trajectories = np.stack(history, axis=1)
    labels = envs.label_grid(env.kind, trajectories.reshape(-1, env.state_dim)).reshape(trajectories.shape[:2])
    safe_runs = ~(labels == UNSAFE).any(axis=1)
    goal_rate = None
    if env.kind == "dubins":
        reached = [
            any(envs.reached_goal(env.state_from_array(row), env.params) for row in trajectory)
            for trajectory in trajectories
        ]
        goal_rate = float(np.mean(reached))
    return RolloutResult(
        trajectories=trajectories,
        labels=labels,
        actions=np.stack(applied, axis=1) if applied else np.zeros((len(starts), 0)),
        safety_rate=float(np.mean(safe_runs)),
        goal_rate=goal_rate,
    )


def attraction_rate(result: RolloutResult) -> float:
    """Fraction of rollouts that visit the safe region at any step."""
    return float(np.mean((result.labels == SAFE).any(axis=1)))


def summarize(result: RolloutResult, policy: str, region: str) -> RolloutSummary:
    return RolloutSummary(
        policy=policy,
        start_region=region,
        starts=result.starts,
        steps=result.steps,
        safety_rate=result.safety_rate,
        goal_rate=result.goal_rate,
    )


def state_columns(env: envs.EnvKind) -> list[str]:
    return ["theta", "theta_dot"] if env == "pendulum" else ["x", "y", "theta"]


def write_trajectories_csv(path: Path, env: envs.EnvKind, runs: dict[str, RolloutResult]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["policy", "rollout", "step", *state_columns(env), "label"])
        for name, result in runs.items():
            for rollout, (trajectory, labels) in enumerate(zip(result.trajectories, result.labels)):
                for step, (state, code) in enumerate(zip(trajectory, labels)):
                    writer.writerow([name, rollout, step, *(repr(float(v)) for v in state), int(code)])
    return path


def compare_trajectories(
    learned: Controller,
    reference: Controller,
    env: Environment,
    starts: Sequence[EnvState],
    steps: int,
) -> dict[str, RolloutResult]:
    """Learned and reference controllers from identical starts."""
    return {
        "learned": rollout_safety(learned, env, starts, steps),
        "reference": rollout_safety(reference, env, starts, steps),
    }


def default_grid(env: Environment, resolution: int, dubins_theta: float = 0.0) -> GridSpec:
    if env.kind == "pendulum":
        limit = env.params.pendulum.theta_dot_limit
        return GridSpec(resolution=resolution, first_range=(-math.pi, math.pi), second_range=(-limit, limit))
    box = env.params.dubins.box
    return GridSpec(resolution=resolution, first_range=(-box, box), second_range=(-box, box), fixed_theta=dubins_theta)


def grid_states(env: Environment, grid: GridSpec) -> np.ndarray:
    """(n*n, state_dim) states, first axis varying fastest."""
    first = np.linspace(*grid.first_range, grid.resolution)
    second = np.linspace(*grid.second_range, grid.resolution)
    a, b = np.meshgrid(first, second, indexing="xy")
    columns = [a.reshape(-1), b.reshape(-1)]
    if env.kind == "dubins":
        columns.append(np.full(a.size, grid.fixed_theta))
    return np.stack(columns, axis=1)


@dataclass(slots=True)
class Heatmap:
    grid: GridSpec
    states: np.ndarray
    labels: np.ndarray
    values: np.ndarray
    agreement: float
    paths: list[Path] = field(default_factory=list)

    @property
    def image(self) -> np.ndarray:
        return self.values.reshape(self.grid.resolution, self.grid.resolution)


def label_agreement(values: np.ndarray, labels: np.ndarray) -> float:
    """Sign agreement of B with labels on safe/unsafe cells."""
    labelled = (labels == SAFE) | (labels == UNSAFE)
    if not labelled.any():
        raise EvaluationError("grid has no labelled cells")
    expected_positive = labels[labelled] == UNSAFE
    return float(np.mean((values[labelled] > 0) == expected_positive))


def render_states(env: Environment, states: np.ndarray, *, workers: int = 1) -> np.ndarray:
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return np.stack(list(executor.map(lambda row: env.render(env.state_from_array(row)), states)))


def diverging_colours(values: np.ndarray) -> np.ndarray:
    """Blue for B < 0, white at 0, red for B > 0; symmetric scale."""
    values = np.asarray(values, dtype=np.float64)
    scale = float(np.max(np.abs(values))) or 1.0
    t = np.clip(values / scale, -1.0, 1.0)[..., None]
    white = np.array([255.0, 255.0, 255.0])
    blue = np.array([40.0, 80.0, 200.0])
    red = np.array([200.0, 40.0, 40.0])
    colours = np.where(t < 0, white + (blue - white) * (-t), white + (red - white) * t)
    return np.round(colours).astype(np.uint8)


def heatmap_image(values: np.ndarray, *, cell: int = 4) -> np.ndarray:
    """Second state axis grows upwards."""
    image = diverging_colours(np.flipud(values))
    return np.repeat(np.repeat(image, cell, axis=0), cell, axis=1)


def write_heatmap_csv(path: Path, env: envs.EnvKind, states: np.ndarray, labels: np.ndarray, values: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow([*state_columns(env), "label", "b"])
        for state, code, value in zip(states, labels, values):
            writer.writerow([*(repr(float(v)) for v in state), int(code), repr(float(value))])
    return path


def read_heatmap_csv(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    body = rows[1:]
    states = np.array([[float(v) for v in row[:-2]] for row in body])
    labels = np.array([int(row[-2]) for row in body], dtype=np.int64)
    values = np.array([float(row[-1]) for row in body], dtype=np.float32)
    return states, labels, values


def export_heatmap(
    barrier: BarrierNet,
    encoder: PatchEncoder,
    env: Environment,
    grid: GridSpec,
    out_dir: Path | None = None,
    *,
    workers: int = 1,
) -> Heatmap:
    states = grid_states(env, grid)
    frames = render_states(env, states, workers=workers)
    values = barrier_value(barrier, pool(encoder.encode_batch(frames)))
    labels = envs.label_grid(env.kind, states)
    heatmap = Heatmap(grid=grid, states=states, labels=labels, values=values, agreement=label_agreement(values, labels))
    if out_dir is not None:
        out_dir = Path(out_dir)
        heatmap.paths.append(write_heatmap_csv(out_dir / "heatmap.csv", env.kind, states, labels, values))
        heatmap.paths.append(envs.write_ppm(out_dir / "heatmap.ppm", heatmap_image(heatmap.image)))
    logger.info("heatmap_exported cells=%s agreement=%.4f", len(values), heatmap.agreement)
    return heatmap


@dataclass(slots=True)
class Projection:
    coords: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    mean: np.ndarray


def _fix_sign(vector: np.ndarray) -> np.ndarray:
    return vector if vector[np.argmax(np.abs(vector))] >= 0 else -vector


def pca_projection(
    latents: np.ndarray,
    *,
    components: int = 2,
    max_iter: int = 1000,
    tol: float = 1e-9,
) -> Projection:
    """Top principal components by power iteration with deflation."""
    data = np.asarray(latents, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 3:
        raise EvaluationError(f"PCA needs at least 3 samples in an (n, d) array, got {data.shape}")
    mean = data.mean(axis=0)
    centred = data - mean
    cov = centred.T @ centred / (data.shape[0] - 1)
    scale = float(np.trace(cov))
    found_vectors: list[np.ndarray] = []
    found_values: list[float] = []
    start = seeding.stream(0, "pca").standard_normal(cov.shape[0])
    for _ in range(min(components, cov.shape[0])):
        vector = start / np.linalg.norm(start)
        for _ in range(max_iter):
            product = cov @ vector
            norm = np.linalg.norm(product)
            if norm == 0.0:
                break
            updated = product / norm
            residual = min(np.linalg.norm(updated - vector), np.linalg.norm(updated + vector))
            vector = updated
            if residual < tol:
                break
        value = float(vector @ cov @ vector)
        if scale <= 0.0 or value <= 1e-12 * max(scale, 1.0):
            warnings.warn(
                f"PCA input is rank deficient; emitting {len(found_vectors)} component(s)", RuntimeWarning, stacklevel=2
            )
            logger.warning("pca_rank_deficient components=%s", len(found_vectors))
            break
        vector = _fix_sign(vector)
        found_vectors.append(vector)
        found_values.append(value)
        cov = cov - value * np.outer(vector, vector)
    basis = np.array(found_vectors).reshape(len(found_vectors), data.shape[1])
    return Projection(
        coords=centred @ basis.T,
        components=basis,
        explained_variance=np.array(found_values),
        mean=mean,
    )


def write_pca_csv(path: Path, coords: np.ndarray, labels: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    padded = np.zeros((len(coords), 2))
    padded[:, : coords.shape[1]] = coords[:, :2]
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["pc1", "pc2", "label"])
        for (pc1, pc2), code in zip(padded, labels):
            writer.writerow([repr(float(pc1)), repr(float(pc2)), int(code)])
    return path


def linear_probe_accuracy(
    features: np.ndarray,
    positive: np.ndarray,
    *,
    seed: int = 0,
    holdout_fraction: float = 0.3,
    steps: int = 500,
    lr: float = 0.05,
) -> float:
    """Held-out accuracy of a hinge-loss linear classifier."""
    features = np.asarray(features, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    if len(features) < 4 or positive.all() or not positive.any():
        raise EvaluationError("linear probe needs at least 4 samples from both classes")
    order = seeding.stream(seed, "probe").permutation(len(features))
    held = max(1, int(round(len(features) * holdout_fraction)))
    test, train = order[:held], order[held:]
    mean, std = features[train].mean(axis=0), features[train].std(axis=0) + 1e-8
    x_train = (features[train] - mean) / std
    x_test = (features[test] - mean) / std
    y = np.where(positive[train], 1.0, -1.0)

    rng = seeding.stream(seed, "probe.init")
    weight = parameter(rng.normal(0.0, 0.01, size=(features.shape[1], 1)))
    bias = parameter(np.zeros((1,)))
    optimizer = Adam([weight, bias], lr=lr)
    inputs = Tensor(x_train)
    targets = y.reshape(-1, 1)
    for _ in range(steps):
        margin = (inputs @ weight + bias) * targets
        loss = (1.0 - margin).relu_hinge().mean() + (weight * weight).sum() * 1e-4
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    scores = x_test @ weight.data.astype(np.float64) + float(bias.data[0])
    return float(np.mean((scores.reshape(-1) > 0) == positive[test]))


def write_verification_report(
    path: Path,
    *,
    env: Environment,
    seed: int,
    signs: SignAccuracy,
    decrease: DecreaseCheck,
    rollouts: Sequence[RolloutSummary],
    attraction: float | None,
) -> VerificationReport:
    report = VerificationReport(
        env=env.kind,
        seed=seed,
        safe_count=signs.safe_count,
        unsafe_count=signs.unsafe_count,
        safe_accuracy=signs.safe_accuracy,
        unsafe_accuracy=signs.unsafe_accuracy,
        decrease_samples=decrease.samples,
        latent_violation_rate=decrease.latent_violation_rate,
        ground_truth_violation_rate=decrease.ground_truth_violation_rate,
        decrease_agreement=decrease.agreement,
        rollouts=list(rollouts),
        attraction_rate=attraction,
    )
    report.write(path)
    return report
