from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from lcbc import ndmath, seeding
from lcbc.certificate import BarrierNet, LossInputError
from lcbc.config import PolicyConfig
from lcbc.layers import MLP, Module
from lcbc.ndmath import ShapeError, Tensor
from lcbc.world_model import TransitionModel


class PolicyNet(Module):
    """pi(z, p) = lo + sigmoid(raw) * (hi - lo), raw from a tanh MLP."""

    def __init__(
        self,
        embed_dim: int,
        proprio_dim: int,
        bounds: tuple[Sequence[float] | float, Sequence[float] | float],
        hidden: Sequence[int],
        rng: np.random.Generator,
    ) -> None:
        self.embed_dim = embed_dim
        self.proprio_dim = proprio_dim
        self._low = np.atleast_1d(np.asarray(bounds[0], dtype=np.float32))
        self._high = np.atleast_1d(np.asarray(bounds[1], dtype=np.float32))
        if self._low.shape != self._high.shape or np.any(self._high <= self._low):
            raise ValueError(f"invalid action bounds {bounds}")
        self.action_dim = self._low.size
        self.mlp = MLP([embed_dim + proprio_dim, *hidden, self.action_dim], rng)

    @classmethod
    def from_config(
        cls,
        cfg: PolicyConfig,
        *,
        embed_dim: int,
        proprio_dim: int,
        bounds: tuple[float, float],
        seed: int,
    ) -> PolicyNet:
        return cls(embed_dim, proprio_dim, bounds, cfg.hidden, seeding.stream(seed, "init.policy"))

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self._low.copy(), self._high.copy()

    def raw(self, z: Tensor | np.ndarray, p: Tensor | np.ndarray) -> Tensor:
        z, p = ndmath.as_tensor(z), ndmath.as_tensor(p)
        if z.ndim == 1:
            z, p = z.reshape(1, z.size), p.reshape(1, p.size)
        if z.shape[-1] != self.embed_dim or p.shape[-1] != self.proprio_dim or z.shape[0] != p.shape[0]:
            raise ShapeError(
                op="policy",
                shapes=[z.shape, p.shape],
                detail=f"expected (N, {self.embed_dim}) latents and (N, {self.proprio_dim}) proprios",
            )
        return self.mlp(ndmath.concat([z, p], axis=1))

    def squash(self, raw: Tensor) -> Tensor:
        return raw.sigmoid() * (self._high - self._low) + self._low

    def __call__(self, z: Tensor | np.ndarray, p: Tensor | np.ndarray) -> Tensor:
        return self.squash(self.raw(z, p))


def act(policy: PolicyNet, z: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Bounded action for one (E,) latent, or one row per (N, E) batch row."""
    with ndmath.no_grad():
        out = policy(z, p).data
    return out[0].copy() if np.ndim(z) == 1 else out.copy()


@dataclass(frozen=True, slots=True)
class ContextBatch:
    """N context windows; the action in the newest slot is the one the policy replaces."""

    tokens: np.ndarray
    actions: np.ndarray
    proprios: np.ndarray

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pooled(self) -> np.ndarray:
        return self.tokens[:, -1].mean(axis=1)

    @property
    def current_proprios(self) -> np.ndarray:
        return self.proprios[:, -1]


def predicted_next_pooled(policy: PolicyNet, model: TransitionModel, batch: ContextBatch) -> Tensor:
    if batch is None or len(batch) == 0:
        raise LossInputError("synthesis loss needs a nonempty batch of context windows")
    if batch.tokens.ndim != 4 or batch.tokens.shape[1] != model.context + 1:
        raise LossInputError(
            f"each element needs a full context window of {model.context + 1} steps, got tokens {batch.tokens.shape}"
        )
    n = len(batch)
    chosen = policy(batch.pooled, batch.current_proprios)
    history = Tensor(batch.actions[:, :-1].reshape(n, model.context, -1))
    actions = ndmath.concat([history, chosen.reshape(n, 1, policy.action_dim)], axis=1)
    next_tokens = model.forward(batch.tokens, actions, batch.proprios)
    return next_tokens.mean(axis=1)


def synthesis_terms(b_next: Tensor | np.ndarray, b_now: Tensor | np.ndarray) -> Tensor:
    """sum max(0, B(z') - B(z))."""
    return (ndmath.as_tensor(b_next) - ndmath.as_tensor(b_now)).relu_hinge().sum()


def synthesis_loss(barrier: BarrierNet, policy: PolicyNet, model: TransitionModel, batch: ContextBatch) -> Tensor:
    """Gradient reaches the policy only through the newest action slot."""
    b_next = barrier(predicted_next_pooled(policy, model, batch))
    b_now = barrier(batch.pooled)
    return synthesis_terms(b_next, b_now)


def imitation_loss(policy: PolicyNet, z: np.ndarray, p: np.ndarray, a_user: np.ndarray) -> Tensor:
    a_user = np.asarray(a_user, dtype=np.float32).reshape(-1, policy.action_dim)
    prediction = policy(z, p)
    if prediction.shape != a_user.shape:
        raise ShapeError(op="imitation", shapes=[prediction.shape, a_user.shape], detail="one user action per row")
    return ndmath.mean_squared_error(prediction, a_user)
