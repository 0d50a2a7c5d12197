"""Episode storage, collection and safe/unsafe index sets.

Every episode stores ``length + 1`` records. Record t holds the frame,
proprio and ground-truth state at step t plus the action applied at step t;
that action produced record t+1. The last record's action has no successor.
Ground-truth states are kept for labelling and evaluation only.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lcbc import checkpoint, envs, seeding
from lcbc.envs import LABEL_CODES, Environment, SafetyLabel
from lcbc.schemas import DatasetManifest

logger = logging.getLogger("lcbc.datasets")

MANIFEST_NAME = "manifest.txt"
FRAMES_NAME = "frames.lcbc"
RECORDS_NAME = "records.lcbc"


class DatasetError(ValueError):
    pass


@dataclass(slots=True)
class Episode:
    frames: np.ndarray
    proprios: np.ndarray
    actions: np.ndarray
    states: np.ndarray

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(slots=True)
class TransitionDataset:
    manifest: DatasetManifest
    frames: np.ndarray
    proprios: np.ndarray
    actions: np.ndarray
    states: np.ndarray

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.manifest.episode_lengths)]).astype(np.int64)

    @property
    def num_episodes(self) -> int:
        return len(self.manifest.episode_lengths)

    @property
    def record_episode(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_episodes), self.manifest.episode_lengths)

    @property
    def record_step(self) -> np.ndarray:
        return np.concatenate([np.arange(n) for n in self.manifest.episode_lengths]).astype(np.int64)

    def episode(self, index: int) -> Episode:
        start, stop = self.offsets[index], self.offsets[index + 1]
        return Episode(
            frames=self.frames[start:stop],
            proprios=self.proprios[start:stop],
            actions=self.actions[start:stop],
            states=self.states[start:stop],
        )

    def episodes(self) -> list[Episode]:
        return [self.episode(i) for i in range(self.num_episodes)]

    def labels(self) -> np.ndarray:
        """Label codes recomputed from the stored states."""
        return envs.label_grid(self.manifest.env, self.states)

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        for array in (self.frames, self.proprios, self.actions, self.states):
            digest.update(np.ascontiguousarray(array).tobytes())
        digest.update(",".join(map(str, self.manifest.episode_lengths)).encode("ascii"))
        return digest.hexdigest()

    @classmethod
    def from_episodes(
        cls,
        episodes: list[Episode],
        *,
        env: Environment,
        kind: str,
        seed: int,
    ) -> TransitionDataset:
        if not episodes:
            raise DatasetError("a dataset needs at least one episode")
        lengths = [len(ep) for ep in episodes]
        dataset = cls(
            manifest=DatasetManifest(
                env=env.kind,
                kind=kind,
                seed=seed,
                episodes=len(episodes),
                transitions=sum(n - 1 for n in lengths),
                frame_shape=tuple(episodes[0].frames.shape[1:]),
                action_dim=envs.ACTION_DIM,
                proprio_dim=envs.PROPRIO_DIM,
                state_dim=env.state_dim,
                episode_lengths=lengths,
            ),
            frames=np.concatenate([ep.frames for ep in episodes]),
            proprios=np.concatenate([ep.proprios for ep in episodes]).astype(np.float32),
            actions=np.concatenate([ep.actions for ep in episodes]).astype(np.float32),
            states=np.concatenate([ep.states for ep in episodes]).astype(np.float32),
        )
        dataset.manifest = dataset.manifest.model_copy(update={"content_sha256": dataset.content_hash()})
        return dataset

    def save(self, directory: Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        checkpoint.save_tensors(directory / FRAMES_NAME, {"frames": self.frames})
        checkpoint.save_tensors(
            directory / RECORDS_NAME,
            {"proprios": self.proprios, "actions": self.actions, "states": self.states},
        )
        (directory / MANIFEST_NAME).write_text(self.manifest.to_text(), encoding="utf-8")
        logger.info(
            "dataset_saved dir=%s env=%s kind=%s transitions=%s",
            directory,
            self.manifest.env,
            self.manifest.kind,
            self.manifest.transitions,
        )
        return directory

    @classmethod
    def load(cls, directory: Path) -> TransitionDataset:
        directory = Path(directory)
        manifest_path = directory / MANIFEST_NAME
        if not manifest_path.is_file():
            raise DatasetError(f"no dataset manifest at {manifest_path}")
        manifest = DatasetManifest.from_text(manifest_path.read_text(encoding="utf-8"))
        frames = checkpoint.load_tensors(directory / FRAMES_NAME)
        records = checkpoint.load_tensors(directory / RECORDS_NAME)
        total = sum(manifest.episode_lengths)
        checkpoint.require_tensors(frames, {"frames": (total, *manifest.frame_shape)}, source=str(directory / FRAMES_NAME))
        checkpoint.require_tensors(
            records,
            {
                "proprios": (total, manifest.proprio_dim),
                "actions": (total, manifest.action_dim),
                "states": (total, manifest.state_dim),
            },
            source=str(directory / RECORDS_NAME),
        )
        dataset = cls(
            manifest=manifest,
            frames=frames["frames"],
            proprios=records["proprios"],
            actions=records["actions"],
            states=records["states"],
        )
        if manifest.content_sha256 and dataset.content_hash() != manifest.content_sha256:
            raise DatasetError(f"{directory}: content hash does not match the manifest")
        return dataset


def _run_episode(env: Environment, state: envs.EnvState, steps: int, choose_action) -> Episode:
    frames, proprios, actions, states = [], [], [], []
    for t in range(steps + 1):
        action = float(choose_action(state))
        frames.append(env.render(state))
        proprios.append(env.proprio(state))
        actions.append([action])
        states.append(state.as_array())
        if t < steps:
            state = env.step(state, action)
    return Episode(
        frames=np.stack(frames),
        proprios=np.asarray(proprios, dtype=np.float32).reshape(-1, envs.PROPRIO_DIM),
        actions=np.asarray(actions, dtype=np.float32),
        states=np.asarray(states, dtype=np.float32),
    )


def _random_episode(env: Environment, seed: int, index: int, steps: int) -> Episode:
    rng = seeding.stream(seed, "collection", index)
    low, high = env.action_bounds
    start = env.sample("all", rng)
    return _run_episode(env, start, steps, lambda _: rng.uniform(low, high))


def _reference_start(env: Environment, rng: np.random.Generator, index: int) -> envs.EnvState:
    """Even episodes start anywhere in the domain, odd ones outside the unsafe set."""
    start = env.sample("all", rng)
    while index % 2 and env.label(start) is SafetyLabel.unsafe:
        start = env.sample("all", rng)
    return start


def _reference_episode(env: Environment, seed: int, index: int, steps: int) -> Episode:
    rng = seeding.stream(seed, "collection.labeled", index)
    return _run_episode(env, _reference_start(env, rng, index), steps, env.reference_action)


def episode_plan(n_transitions: int, episode_length: int) -> list[int]:
    """Transitions per episode; the last episode takes the remainder."""
    full, rest = divmod(n_transitions, episode_length)
    return [episode_length] * full + ([rest] if rest else [])


def collect_random(
    env: Environment,
    n_transitions: int,
    seed: int,
    *,
    episode_length: int = 100,
    workers: int = 1,
    min_transitions: int = 1,
) -> TransitionDataset:
    """Exactly ``n_transitions`` uniform-random-action transitions."""
    if n_transitions < min_transitions:
        raise DatasetError(f"need at least {min_transitions} transitions, got {n_transitions}")
    plan = episode_plan(n_transitions, episode_length)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        episodes = list(pool.map(lambda item: _random_episode(env, seed, item[0], item[1]), enumerate(plan)))
    dataset = TransitionDataset.from_episodes(episodes, env=env, kind="random", seed=seed)
    logger.info(
        "collect_random env=%s transitions=%s episodes=%s seed=%s", env.kind, n_transitions, len(plan), seed
    )
    return dataset


@dataclass(slots=True)
class LabeledSets:
    """Record indices of 𝒞 (safe), 𝒰 (unsafe), 𝒟 (all) and consecutive pairs.

    ``safe_pairs`` / ``unsafe_pairs`` hold (i, i+1) record pairs inside one
    episode, assigned by the label of the later record.
    """

    safe: np.ndarray
    unsafe: np.ndarray
    all: np.ndarray
    safe_pairs: np.ndarray
    unsafe_pairs: np.ndarray

    @classmethod
    def from_dataset(cls, dataset: TransitionDataset, episodes: np.ndarray | None = None) -> LabeledSets:
        labels = dataset.labels()
        record_episode = dataset.record_episode
        if episodes is None:
            keep = np.ones(len(labels), dtype=bool)
        else:
            keep = np.isin(record_episode, episodes)
        indices = np.flatnonzero(keep)
        following = indices[(indices + 1 < len(labels))]
        following = following[keep[following + 1] & (record_episode[following] == record_episode[following + 1])]
        pairs = np.stack([following, following + 1], axis=1) if len(following) else np.zeros((0, 2), dtype=np.int64)
        later = labels[pairs[:, 1]] if len(pairs) else np.zeros((0,), dtype=np.int64)
        return cls(
            safe=indices[labels[indices] == LABEL_CODES[SafetyLabel.safe]],
            unsafe=indices[labels[indices] == LABEL_CODES[SafetyLabel.unsafe]],
            all=indices,
            safe_pairs=pairs[later == LABEL_CODES[SafetyLabel.safe]],
            unsafe_pairs=pairs[later == LABEL_CODES[SafetyLabel.unsafe]],
        )

    def counts(self) -> dict[str, int]:
        return {
            "safe": len(self.safe),
            "unsafe": len(self.unsafe),
            "all": len(self.all),
            "safe_pairs": len(self.safe_pairs),
            "unsafe_pairs": len(self.unsafe_pairs),
        }


def split_episodes(num_episodes: int, holdout_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(train, held-out) episode indices; at least one of each when there are two or more episodes."""
    order = seeding.stream(seed, "split").permutation(num_episodes)
    held = int(round(num_episodes * holdout_fraction))
    if holdout_fraction > 0 and num_episodes > 1:
        held = min(max(held, 1), num_episodes - 1)
    return np.sort(order[held:]), np.sort(order[:held])


def collect_labeled(
    env: Environment,
    n_trajectories: int,
    seed: int,
    *,
    episode_length: int = 100,
    workers: int = 1,
) -> tuple[TransitionDataset, LabeledSets]:
    """Fresh reference-policy rollouts from uniform initial states, with 𝒞/𝒰/𝒟 indices."""
    if n_trajectories < 1:
        raise DatasetError("need at least one labelled trajectory")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        episodes = list(pool.map(lambda i: _reference_episode(env, seed, i, episode_length), range(n_trajectories)))
    dataset = TransitionDataset.from_episodes(episodes, env=env, kind="labeled", seed=seed)
    sets = LabeledSets.from_dataset(dataset)
    logger.info("collect_labeled env=%s trajectories=%s counts=%s", env.kind, n_trajectories, sets.counts())
    return dataset, sets
