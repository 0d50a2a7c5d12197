"""Two-stage training.

Stage 1 pretrains and freezes the encoder, then fits the transition model on
random-action episodes. Stage 2 trains barrier and policy together on the
reference-policy episodes; the barrier stops training once its loss plateaus
while the policy continues until it plateaus too (or the epoch cap is hit).
"""

from __future__ import annotations

import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lcbc import checkpoint, seeding
from lcbc.certificate import BarrierHyper, BarrierNet, PairBatch, barrier_loss, lie_loss
from lcbc.config import Settings
from lcbc.controller import ContextBatch, PolicyNet, imitation_loss, synthesis_loss
from lcbc.datasets import DatasetError, LabeledSets, TransitionDataset, split_episodes
from lcbc.encoder import EncoderGeometry, PatchEncoder, export_encoder, import_encoder, pool, pretrain_encoder
from lcbc.envs import ACTION_DIM, PROPRIO_DIM, Environment
from lcbc.ndmath import Adam, NumericError, Tensor
from lcbc.schemas import EpochRecord, TrainReport
from lcbc.world_model import (
    LatentSequence,
    TransitionModel,
    WorldModelFit,
    copy_baseline_errors,
    one_step_errors,
    train_world_model,
)

logger = logging.getLogger("lcbc.pipeline")


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path: Path, what: str) -> None:
        self.path = Path(path)
        self.what = what
        super().__init__(f"missing {what}: expected {self.path}")


class TrainingDivergedError(NumericError):
    def __init__(self, message: str, *, snapshot: Path | None = None) -> None:
        self.snapshot = snapshot
        super().__init__(message if snapshot is None else f"{message} (snapshot: {snapshot})")


@dataclass(frozen=True, slots=True)
class RunLayout:
    root: Path

    @property
    def random_dataset(self) -> Path:
        return self.root / "datasets" / "random"

    @property
    def labeled_dataset(self) -> Path:
        return self.root / "datasets" / "labeled"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def encoder(self) -> Path:
        return self.checkpoints / "encoder.lcbc"

    @property
    def world_model(self) -> Path:
        return self.checkpoints / "world_model.lcbc"

    @property
    def barrier(self) -> Path:
        return self.checkpoints / "barrier.lcbc"

    @property
    def policy(self) -> Path:
        return self.checkpoints / "policy.lcbc"

    @property
    def diverged_snapshot(self) -> Path:
        return self.checkpoints / "diverged_stage2.lcbc"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def stage1_report(self) -> Path:
        return self.reports / "stage1.csv"

    @property
    def world_model_loss(self) -> Path:
        return self.reports / "world_model_loss.csv"

    @property
    def stage2_report(self) -> Path:
        return self.reports / "stage2.csv"

    @property
    def verification(self) -> Path:
        return self.reports / "verification.json"

    @property
    def viz(self) -> Path:
        return self.root / "viz"

    def require(self, path: Path, what: str) -> Path:
        if not Path(path).exists():
            raise MissingArtifactError(path, what)
        return path


class ConvergenceMonitor:
    """Plateau test on an exponentially smoothed loss.

    Fires once the relative change of the smoothed loss across the last
    ``window`` updates drops below ``tol``.
    """

    def __init__(self, *, window: int = 20, tol: float = 1e-3, smoothing: float = 0.9) -> None:
        if window < 2:
            raise ValueError("convergence window must be at least 2")
        self.window = window
        self.tol = tol
        self.smoothing = smoothing
        self.smoothed: list[float] = []

    def update(self, loss: float) -> bool:
        previous = self.smoothed[-1] if self.smoothed else loss
        value = loss if not self.smoothed else self.smoothing * previous + (1.0 - self.smoothing) * loss
        self.smoothed.append(value)
        return self.converged

    @property
    def converged(self) -> bool:
        if len(self.smoothed) <= self.window:
            return False
        old, new = self.smoothed[-1 - self.window], self.smoothed[-1]
        return abs(new - old) / max(abs(old), 1e-12) < self.tol


def encode_sequences(encoder: PatchEncoder, dataset: TransitionDataset, episodes: Sequence[int]) -> list[LatentSequence]:
    sequences = []
    for index in episodes:
        episode = dataset.episode(int(index))
        sequences.append(
            LatentSequence(
                tokens=encoder.encode_batch(episode.frames),
                actions=episode.actions.reshape(len(episode), -1),
                proprios=episode.proprios.reshape(len(episode), -1),
            )
        )
    return sequences


@dataclass(slots=True)
class Stage1Result:
    encoder: PatchEncoder
    world_model: TransitionModel
    report: TrainReport
    fit: WorldModelFit
    held_out_one_step: float | None = None
    held_out_copy_baseline: float | None = None


def train_stage1(dataset: TransitionDataset, settings: Settings) -> Stage1Result:
    started = time.perf_counter()
    train_eps, held_eps = split_episodes(dataset.num_episodes, settings.train.holdout_fraction, settings.seed)
    geometry = EncoderGeometry.from_settings(settings)
    if settings.encoder.import_path is not None:
        encoder = import_encoder(settings.encoder.import_path, geometry)
    else:
        frames = np.concatenate([dataset.episode(int(i)).frames for i in train_eps])
        encoder = pretrain_encoder(frames, settings)
    if not encoder.frozen:
        raise RuntimeError("encoder must be frozen before the transition model is trained")

    train_seqs = encode_sequences(encoder, dataset, train_eps)
    held_seqs = encode_sequences(encoder, dataset, held_eps)
    held_usable = [seq for seq in held_seqs if len(seq) >= settings.world_model.context + 1 + settings.world_model.horizon]
    fit = train_world_model(
        train_seqs,
        settings.world_model,
        seed=settings.seed,
        encoder=encoder,
        held_out=held_usable,
    )
    report = TrainReport(stage="stage1", env=settings.env, seed=settings.seed, converged=True)
    for epoch, loss in enumerate(fit.losses, start=1):
        held = fit.held_out[epoch - 1] if fit.held_out else None
        report.epochs.append(EpochRecord(epoch=epoch, l_pred=loss, held_out_pred=held, l_total=loss))
    report.wall_clock_s = time.perf_counter() - started

    result = Stage1Result(encoder=encoder, world_model=fit.model, report=report, fit=fit)
    if held_usable:
        result.held_out_one_step = float(np.mean(one_step_errors(fit.model, held_usable)))
        result.held_out_copy_baseline = float(np.mean(copy_baseline_errors(held_usable, fit.model.context)))
    logger.info(
        "stage1_done epochs=%s final_loss=%.6f one_step=%s copy_baseline=%s seconds=%.1f",
        len(fit.losses),
        fit.losses[-1],
        result.held_out_one_step,
        result.held_out_copy_baseline,
        report.wall_clock_s,
    )
    return result


def build_world_model(settings: Settings) -> TransitionModel:
    return TransitionModel.from_config(
        settings.world_model,
        embed_dim=settings.encoder.embed_dim,
        action_dim=ACTION_DIM,
        proprio_dim=PROPRIO_DIM,
        seed=settings.seed,
    )


def build_barrier(settings: Settings) -> BarrierNet:
    return BarrierNet.from_config(settings.barrier, embed_dim=settings.encoder.embed_dim, seed=settings.seed)


def build_policy(settings: Settings) -> PolicyNet:
    return PolicyNet.from_config(
        settings.policy,
        embed_dim=settings.encoder.embed_dim,
        proprio_dim=PROPRIO_DIM,
        bounds=settings.action_bounds,
        seed=settings.seed,
    )


def _load_module(module, path: Path) -> None:
    tensors = checkpoint.load_tensors(path, allow_truncated=True)
    expected = {name: param.shape for name, param in module.named_parameters()}
    checkpoint.require_tensors(tensors, expected, source=str(path))
    module.load_state_dict(tensors, source=str(path))


def save_stage1(result: Stage1Result, layout: RunLayout) -> None:
    export_encoder(result.encoder, layout.encoder)
    checkpoint.save_tensors(layout.world_model, result.world_model.state_dict())
    result.report.write_csv(layout.stage1_report)
    result.fit.write_loss_csv(layout.world_model_loss)


def load_stage1(settings: Settings, layout: RunLayout) -> tuple[PatchEncoder, TransitionModel]:
    layout.require(layout.encoder, "stage-1 encoder checkpoint")
    layout.require(layout.world_model, "stage-1 world-model checkpoint")
    encoder = import_encoder(layout.encoder, EncoderGeometry.from_settings(settings))
    model = build_world_model(settings)
    _load_module(model, layout.world_model)
    model.set_trainable(False)
    return encoder, model


@dataclass(slots=True)
class LabeledLatents:
    """Encoded labelled dataset: per-record tokens plus the index sets."""

    dataset: TransitionDataset
    tokens: np.ndarray
    sets: LabeledSets
    context: int
    record_episode: np.ndarray = field(init=False)
    record_step: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.record_episode = self.dataset.record_episode
        self.record_step = self.dataset.record_step

    @property
    def pooled(self) -> np.ndarray:
        return pool(self.tokens)

    def context_ready(self, indices: np.ndarray) -> np.ndarray:
        """Indices with a full context window inside their own episode."""
        indices = np.asarray(indices, dtype=np.int64)
        return indices[self.record_step[indices] >= self.context]

    def contexts(self, indices: np.ndarray) -> ContextBatch:
        offsets = np.arange(-self.context, 1)
        window = np.asarray(indices, dtype=np.int64)[:, None] + offsets[None, :]
        n = len(indices)
        return ContextBatch(
            tokens=self.tokens[window],
            actions=self.dataset.actions[window].reshape(n, self.context + 1, -1),
            proprios=self.dataset.proprios[window].reshape(n, self.context + 1, -1),
        )

    def pairs(self, pairs: np.ndarray) -> PairBatch:
        pooled = self.pooled
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return PairBatch(
            current=pooled[pairs[:, 0]],
            following=pooled[pairs[:, 1]],
            trajectory=self.record_episode[pairs],
            steps=self.record_step[pairs],
        )


def encode_labeled(encoder: PatchEncoder, dataset: TransitionDataset, sets: LabeledSets, context: int) -> LabeledLatents:
    return LabeledLatents(dataset=dataset, tokens=encoder.encode_batch(dataset.frames), sets=sets, context=context)


@dataclass(slots=True)
class Stage2Result:
    barrier: BarrierNet
    policy: PolicyNet
    report: TrainReport
    train_episodes: np.ndarray
    held_out_episodes: np.ndarray


def _sample(rng: np.random.Generator, candidates: np.ndarray, size: int) -> np.ndarray:
    if len(candidates) <= size:
        return np.asarray(candidates)
    return candidates[np.sort(rng.choice(len(candidates), size, replace=False))]


def _snapshot(barrier: BarrierNet, policy: PolicyNet, path: Path) -> Path:
    tensors = {f"barrier.{k}": v for k, v in barrier.state_dict().items()}
    tensors.update({f"policy.{k}": v for k, v in policy.state_dict().items()})
    return checkpoint.save_tensors(path, tensors)


def train_stage2(
    latents: LabeledLatents,
    world_model: TransitionModel,
    settings: Settings,
    *,
    layout: RunLayout | None = None,
    train_episodes: np.ndarray | None = None,
) -> Stage2Result:
    started = time.perf_counter()
    dataset = latents.dataset
    if train_episodes is None:
        train_episodes, held_episodes = split_episodes(dataset.num_episodes, settings.train.holdout_fraction, settings.seed)
    else:
        held_episodes = np.setdiff1d(np.arange(dataset.num_episodes), train_episodes)
    sets = LabeledSets.from_dataset(dataset, train_episodes)
    counts = sets.counts()
    if counts["safe"] == 0 or counts["unsafe"] == 0:
        raise DatasetError(f"stage 2 needs safe and unsafe training samples, got {counts}")
    ready = latents.context_ready(sets.all)
    if len(ready) == 0:
        raise DatasetError(f"no training record has a full context window of {latents.context + 1} steps")

    world_model.set_trainable(False)
    hyper = BarrierHyper.from_config(settings.barrier)
    barrier = build_barrier(settings)
    policy = build_policy(settings)
    optim = settings.optim
    barrier_opt = Adam(barrier.parameters(), lr=optim.lr, beta1=optim.beta1, beta2=optim.beta2, eps=optim.eps,
                       max_grad_norm=optim.max_grad_norm)
    policy_opt = Adam(policy.parameters(), lr=optim.lr, beta1=optim.beta1, beta2=optim.beta2, eps=optim.eps,
                      max_grad_norm=optim.max_grad_norm)
    train = settings.train
    barrier_monitor = ConvergenceMonitor(window=train.convergence_window, tol=train.convergence_tol, smoothing=train.smoothing)
    policy_monitor = ConvergenceMonitor(window=train.convergence_window, tol=train.convergence_tol, smoothing=train.smoothing)
    rng = seeding.stream(settings.seed, "shuffle.stage2")
    report = TrainReport(stage="stage2", env=settings.env, seed=settings.seed)
    pooled = latents.pooled
    joint = settings.policy.joint_theta
    barrier_frozen = False
    logger.info("stage2_start counts=%s context_ready=%s joint_theta=%s", counts, len(ready), joint)

    for epoch in range(1, train.stage2_max_epochs + 1):
        safe = _sample(rng, sets.safe, train.batch_size)
        unsafe = _sample(rng, sets.unsafe, train.batch_size)
        safe_pairs = _sample(rng, sets.safe_pairs, train.batch_size)
        unsafe_pairs = _sample(rng, sets.unsafe_pairs, train.batch_size)
        ctx_index = _sample(rng, ready, train.batch_size)
        imitate = _sample(rng, sets.all, train.batch_size)

        try:
            barrier_opt.zero_grad()
            policy_opt.zero_grad()
            seg_norm = len(safe) + len(unsafe)
            pair_norm = max(len(safe_pairs) + len(unsafe_pairs), 1)
            l_barrier = barrier_loss(barrier, pooled[safe], pooled[unsafe], hyper) / seg_norm
            if len(safe_pairs) + len(unsafe_pairs):
                l_lie = lie_loss(barrier, latents.pairs(safe_pairs), latents.pairs(unsafe_pairs), hyper) / pair_norm
            else:
                l_lie = Tensor(0.0)
            certificate_part = l_barrier + l_lie
            if certificate_part.requires_grad:
                certificate_part.backward()
            kept = [p.grad for p in barrier.parameters()]

            l_syn = synthesis_loss(barrier, policy, world_model, latents.contexts(ctx_index)) / len(ctx_index)
            l_pi = imitation_loss(policy, pooled[imitate], dataset.proprios[imitate], dataset.actions[imitate])
            controller_part = l_syn + l_pi
            controller_part.backward()
            if not joint:
                for param, grad in zip(barrier.parameters(), kept):
                    param.grad = grad
            if not barrier_frozen:
                barrier_opt.step()
            policy_opt.step()
        except NumericError as exc:
            snapshot = _snapshot(barrier, policy, layout.diverged_snapshot) if layout is not None else None
            logger.error("stage2_diverged epoch=%s error=%s snapshot=%s", epoch, exc, snapshot)
            raise TrainingDivergedError(f"stage 2 diverged at epoch {epoch}: {exc}", snapshot=snapshot) from exc

        components = [l_barrier.item(), l_lie.item(), l_syn.item(), l_pi.item()]
        record = EpochRecord(
            epoch=epoch,
            l_barrier=components[0],
            l_lie=components[1],
            l_syn=components[2],
            l_pi=components[3],
            l_total=float(np.sum(components)),
            barrier_frozen=barrier_frozen,
            safe_batch=len(safe),
            unsafe_batch=len(unsafe),
        )
        report.epochs.append(record)

        if not barrier_frozen and barrier_monitor.update(components[0] + components[1]):
            barrier_frozen = True
            barrier.set_trainable(False)
            report.barrier_frozen_at = epoch
            logger.info("stage2_barrier_frozen epoch=%s loss=%.6f", epoch, components[0] + components[1])
        controller_done = policy_monitor.update(components[2] + components[3])
        if epoch % 50 == 0 or epoch == 1:
            logger.info(
                "stage2_epoch epoch=%s total=%.6f barrier=%.6f lie=%.6f syn=%.6f pi=%.6f norm_seg=%s norm_pairs=%s",
                epoch, record.l_total, *components, seg_norm, pair_norm,
            )
        if barrier_frozen and controller_done:
            report.converged = True
            break

    if not barrier_frozen:
        barrier.set_trainable(False)
    policy.set_trainable(False)
    report.wall_clock_s = time.perf_counter() - started
    logger.info(
        "stage2_done epochs=%s converged=%s barrier_frozen_at=%s seconds=%.1f",
        len(report.epochs), report.converged, report.barrier_frozen_at, report.wall_clock_s,
    )
    return Stage2Result(
        barrier=barrier,
        policy=policy,
        report=report,
        train_episodes=np.asarray(train_episodes),
        held_out_episodes=np.asarray(held_episodes),
    )


def save_stage2(result: Stage2Result, layout: RunLayout) -> None:
    checkpoint.save_tensors(layout.barrier, result.barrier.state_dict())
    checkpoint.save_tensors(layout.policy, result.policy.state_dict())
    result.report.write_csv(layout.stage2_report)


def load_stage2(settings: Settings, layout: RunLayout) -> tuple[BarrierNet, PolicyNet]:
    layout.require(layout.barrier, "stage-2 barrier checkpoint")
    layout.require(layout.policy, "stage-2 policy checkpoint")
    barrier = build_barrier(settings)
    _load_module(barrier, layout.barrier)
    policy = build_policy(settings)
    _load_module(policy, layout.policy)
    barrier.set_trainable(False)
    policy.set_trainable(False)
    return barrier, policy


def load_dataset(path: Path, what: str) -> TransitionDataset:
    if not (Path(path) / "manifest.txt").is_file():
        raise MissingArtifactError(Path(path) / "manifest.txt", what)
    return TransitionDataset.load(path)


def environment(settings: Settings) -> Environment:
    return Environment.from_settings(settings)
