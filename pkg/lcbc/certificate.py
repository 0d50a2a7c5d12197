"""Barrier certificate B(z) on pooled latents.

Sign convention: B <= 0 on the safe set, B > 0 on the unsafe set, and B
should not increase along closed-loop transitions.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from lcbc import ndmath, seeding
from lcbc.config import BarrierConfig
from lcbc.layers import MLP, Module
from lcbc.ndmath import ShapeError, Tensor


class LossInputError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class BarrierHyper:
    xi1: float = 1.0
    xi2: float = 1.0
    alpha: float = 1.0
    gamma: float = 0.1

    def __post_init__(self) -> None:
        if self.xi1 <= 0 or self.xi2 <= 0:
            raise ValueError(f"xi1 and xi2 must be positive, got {self.xi1}, {self.xi2}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")

    @classmethod
    def from_config(cls, cfg: BarrierConfig) -> BarrierHyper:
        return cls(xi1=cfg.xi1, xi2=cfg.xi2, alpha=cfg.alpha, gamma=cfg.gamma)


class BarrierNet(Module):
    """tanh MLP with an unbounded scalar output."""

    def __init__(self, embed_dim: int, hidden: Sequence[int], rng: np.random.Generator) -> None:
        self.embed_dim = embed_dim
        self.mlp = MLP([embed_dim, *hidden, 1], rng)

    @classmethod
    def from_config(cls, cfg: BarrierConfig, *, embed_dim: int, seed: int) -> BarrierNet:
        return cls(embed_dim, cfg.hidden, seeding.stream(seed, "init.barrier"))

    def __call__(self, z: Tensor | np.ndarray) -> Tensor:
        """(N, E) → (N,); (E,) → scalar tensor."""
        z = ndmath.as_tensor(z)
        if z.shape[-1] != self.embed_dim or z.ndim not in (1, 2):
            raise ShapeError(op="barrier", shapes=[z.shape], detail=f"expected (..., {self.embed_dim})")
        out = self.mlp(z)
        return out.reshape(()) if z.ndim == 1 else out.reshape(z.shape[0])


def barrier_value(barrier: BarrierNet, z: np.ndarray) -> float | np.ndarray:
    """B(z) for one pooled latent, or one value per row of a batch."""
    with ndmath.no_grad():
        out = barrier(z).data
    return float(out) if out.ndim == 0 else out.copy()


def _nonempty(name: str, values: Tensor) -> None:
    if values.size == 0:
        raise LossInputError(f"{name} batch is empty")


def segregation_loss(b_safe: Tensor | np.ndarray, b_unsafe: Tensor | np.ndarray, h: BarrierHyper) -> Tensor:
    """xi1 * sum max(0, B + gamma) over safe values + xi2 * sum max(0, gamma - B) over unsafe values."""
    b_safe, b_unsafe = ndmath.as_tensor(b_safe), ndmath.as_tensor(b_unsafe)
    _nonempty("safe", b_safe)
    _nonempty("unsafe", b_unsafe)
    safe_term = (b_safe + h.gamma).relu_hinge().sum()
    unsafe_term = (h.gamma - b_unsafe).relu_hinge().sum()
    return safe_term * h.xi1 + unsafe_term * h.xi2


def barrier_loss(
    barrier: BarrierNet, safe: np.ndarray | Tensor, unsafe: np.ndarray | Tensor, h: BarrierHyper
) -> Tensor:
    safe, unsafe = ndmath.as_tensor(safe), ndmath.as_tensor(unsafe)
    if safe.ndim != 2 or safe.shape[0] == 0:
        raise LossInputError(f"safe batch must be a nonempty (N, E) array, got {safe.shape}")
    if unsafe.ndim != 2 or unsafe.shape[0] == 0:
        raise LossInputError(f"unsafe batch must be a nonempty (N, E) array, got {unsafe.shape}")
    return segregation_loss(barrier(safe), barrier(unsafe), h)


@dataclass(frozen=True, slots=True)
class PairBatch:
    """Consecutive latents (z_i, z_{i+1}). ``trajectory`` and ``steps`` are (n, 2)
    integer arrays naming where each member of a pair came from."""

    current: np.ndarray
    following: np.ndarray
    trajectory: np.ndarray | None = None
    steps: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.current)

    def validate(self, name: str) -> None:
        if np.shape(self.current) != np.shape(self.following):
            raise ShapeError(op=f"lie:{name}", shapes=[np.shape(self.current), np.shape(self.following)])
        if self.trajectory is not None:
            trajectory = np.asarray(self.trajectory).reshape(-1, 2)
            crossing = np.flatnonzero(trajectory[:, 0] != trajectory[:, 1])
            if crossing.size:
                raise LossInputError(f"{name} pair #{crossing[0]} crosses a trajectory boundary")
        if self.steps is not None:
            steps = np.asarray(self.steps).reshape(-1, 2)
            gaps = np.flatnonzero(steps[:, 1] != steps[:, 0] + 1)
            if gaps.size:
                raise LossInputError(f"{name} pair #{gaps[0]} is not consecutive (steps {tuple(steps[gaps[0]])})")

    @classmethod
    def empty(cls, embed_dim: int) -> PairBatch:
        blank = np.zeros((0, embed_dim), dtype=np.float32)
        return cls(current=blank, following=blank)


def lie_terms(
    safe_current: Tensor | np.ndarray,
    safe_following: Tensor | np.ndarray,
    unsafe_current: Tensor | np.ndarray,
    unsafe_following: Tensor | np.ndarray,
    alpha: float,
) -> Tensor:
    """sum max(0, B(z_{i+1}) - alpha B(z_i)) over safe pairs + sum max(0, B(z_i) - alpha B(z_{i+1})) over unsafe pairs."""
    total = Tensor(0.0)
    if ndmath.as_tensor(safe_current).size:
        total = total + (ndmath.as_tensor(safe_following) - ndmath.as_tensor(safe_current) * alpha).relu_hinge().sum()
    if ndmath.as_tensor(unsafe_current).size:
        total = total + (ndmath.as_tensor(unsafe_current) - ndmath.as_tensor(unsafe_following) * alpha).relu_hinge().sum()
    return total


def lie_loss(barrier: BarrierNet, safe_pairs: PairBatch, unsafe_pairs: PairBatch, h: BarrierHyper) -> Tensor:
    safe_pairs.validate("safe")
    unsafe_pairs.validate("unsafe")
    if len(safe_pairs) == 0 and len(unsafe_pairs) == 0:
        raise LossInputError("lie loss needs at least one consecutive pair")
    empty = np.zeros((0,), dtype=np.float32)

    def values(batch: np.ndarray) -> Tensor | np.ndarray:
        return barrier(batch) if len(batch) else empty

    return lie_terms(
        values(safe_pairs.current),
        values(safe_pairs.following),
        values(unsafe_pairs.current),
        values(unsafe_pairs.following),
        h.alpha,
    )
