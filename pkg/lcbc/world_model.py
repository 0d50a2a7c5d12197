"""Transition model over patch-token latents.

Per time step the sequence holds the P patch tokens, one action token and one
proprio token. Attention is causal at time-step granularity: every token of
step i sees every token of steps 0..i. The head predicts a residual on the
newest latent, so an untrained model starts near the copy-last-latent baseline.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lcbc import ndmath, seeding
from lcbc.config import WorldModelConfig
from lcbc.datasets import DatasetError
from lcbc.encoder import Latent, PatchEncoder
from lcbc.layers import LayerNorm, Linear, Module, TransformerBlock, sinusoidal_encoding
from lcbc.ndmath import Adam, ShapeError, Tensor

logger = logging.getLogger("lcbc.world_model")


def causal_mask(length: int) -> np.ndarray:
    """``mask[i, j]`` is True (attention allowed) iff ``j <= i``."""
    if length < 1:
        raise ValueError(f"causal mask length must be >= 1, got {length}")
    return np.tril(np.ones((length, length), dtype=bool))


def token_mask(steps: int, tokens_per_step: int) -> np.ndarray:
    return np.kron(causal_mask(steps), np.ones((tokens_per_step, tokens_per_step), dtype=bool))


@dataclass(frozen=True, slots=True)
class ContextWindow:
    """z_{t-H..t}, a_{t-H..t}, p_{t-H..t}; oldest entry first."""

    tokens: np.ndarray
    actions: np.ndarray
    proprios: np.ndarray

    def __post_init__(self) -> None:
        lengths = (len(self.tokens), len(self.actions), len(self.proprios))
        if len(set(lengths)) != 1:
            raise ShapeError(op="context_window", shapes=[np.shape(x) for x in (self.tokens, self.actions, self.proprios)],
                             detail="latents, actions and proprios must have equal length")

    def __len__(self) -> int:
        return len(self.tokens)

    def slide(self, latent: np.ndarray, action: np.ndarray, proprio: np.ndarray) -> ContextWindow:
        return ContextWindow(
            tokens=np.concatenate([self.tokens[1:], np.asarray(latent, dtype=np.float32)[None]]),
            actions=np.concatenate([self.actions[1:], np.asarray(action, dtype=np.float32).reshape(1, -1)]),
            proprios=np.concatenate([self.proprios[1:], np.asarray(proprio, dtype=np.float32).reshape(1, -1)]),
        )


@dataclass(slots=True)
class LatentSequence:
    """One encoded episode. ``actions[t]`` takes the system from step t to t+1."""

    tokens: np.ndarray
    actions: np.ndarray
    proprios: np.ndarray

    def __len__(self) -> int:
        return len(self.tokens)

    def window(self, start: int, context: int) -> ContextWindow:
        stop = start + context + 1
        return ContextWindow(self.tokens[start:stop], self.actions[start:stop], self.proprios[start:stop])


class TransitionModel(Module):
    def __init__(
        self,
        *,
        embed_dim: int,
        action_dim: int,
        proprio_dim: int,
        context: int,
        blocks: int,
        heads: int,
        rng: np.random.Generator,
    ) -> None:
        self.embed_dim = embed_dim
        self.context = context
        self.token_proj = Linear(embed_dim, embed_dim, rng)
        self.action_embed = Linear(action_dim, embed_dim, rng)
        self.proprio_embed = Linear(proprio_dim, embed_dim, rng)
        self.blocks = [TransformerBlock(embed_dim, heads, rng) for _ in range(blocks)]
        self.norm = LayerNorm(embed_dim)
        self.head = Linear(embed_dim, embed_dim, rng, scale=0.1)
        self._time = sinusoidal_encoding(context + 1, embed_dim).astype(np.float32)

    @classmethod
    def from_config(
        cls, cfg: WorldModelConfig, *, embed_dim: int, action_dim: int, proprio_dim: int, seed: int
    ) -> TransitionModel:
        return cls(
            embed_dim=embed_dim,
            action_dim=action_dim,
            proprio_dim=proprio_dim,
            context=cfg.context,
            blocks=cfg.blocks,
            heads=cfg.heads,
            rng=seeding.stream(seed, "init.world_model"),
        )

    def forward(self, tokens: Tensor | np.ndarray, actions: Tensor | np.ndarray, proprios: Tensor | np.ndarray) -> Tensor:
        """(B, T, P, E), (B, T, A), (B, T, Pd) → predicted next tokens (B, P, E)."""
        tokens, actions, proprios = ndmath.as_tensor(tokens), ndmath.as_tensor(actions), ndmath.as_tensor(proprios)
        if tokens.ndim != 4 or tokens.shape[-1] != self.embed_dim:
            raise ShapeError(op="predict_next", shapes=[tokens.shape], detail=f"expected (B, T, P, {self.embed_dim})")
        batch, steps, patches, dim = tokens.shape
        if steps != self.context + 1 or actions.shape[:2] != (batch, steps) or proprios.shape[:2] != (batch, steps):
            raise ShapeError(
                op="predict_next",
                shapes=[tokens.shape, actions.shape, proprios.shape],
                detail=f"context window must hold {self.context + 1} aligned entries",
            )

        patch_tokens = self.token_proj(tokens)
        action_tokens = self.action_embed(actions).reshape(batch, steps, 1, dim)
        proprio_tokens = self.proprio_embed(proprios).reshape(batch, steps, 1, dim)
        sequence = ndmath.concat([patch_tokens, action_tokens, proprio_tokens], axis=2)
        per_step = patches + 2
        sequence = (sequence + self._time[:steps, None, :]).reshape(batch, steps * per_step, dim)

        mask = token_mask(steps, per_step)
        for block in self.blocks:
            sequence = block(sequence, mask=mask)
        sequence = self.norm(sequence).reshape(batch, steps, per_step, dim)
        newest = sequence[:, steps - 1, :patches, :]
        return tokens[:, steps - 1] + self.head(newest)


def predict_next(model: TransitionModel, ctx: ContextWindow) -> Latent:
    with ndmath.no_grad():
        out = model.forward(ctx.tokens[None], ctx.actions[None], ctx.proprios[None])
    return Latent.from_tokens(out.data[0])


def rollout_latent(
    model: TransitionModel,
    ctx: ContextWindow,
    future_actions: np.ndarray,
    future_proprios: np.ndarray,
) -> list[Latent]:
    """k-step open-loop prediction, k = len(future_actions).

    Prediction i becomes the newest context latent for prediction i+1, paired
    with ``future_actions[i]`` and ``future_proprios[i]``.
    """
    future_actions = np.asarray(future_actions, dtype=np.float32).reshape(len(future_actions), -1)
    future_proprios = np.asarray(future_proprios, dtype=np.float32).reshape(len(future_proprios), -1)
    if len(future_actions) < 1 or len(future_actions) != len(future_proprios):
        raise ValueError("rollout needs k >= 1 future actions and as many future proprios")
    predictions: list[Latent] = []
    for index in range(len(future_actions)):
        latent = predict_next(model, ctx)
        predictions.append(latent)
        ctx = ctx.slide(latent.tokens, future_actions[index], future_proprios[index])
    return predictions


def window_starts(sequences: Sequence[LatentSequence], context: int, horizon: int) -> list[tuple[int, int]]:
    span = context + 1 + horizon
    return [(index, start) for index, seq in enumerate(sequences) for start in range(len(seq) - span + 1)]


def _gather(
    sequences: Sequence[LatentSequence], starts: Sequence[tuple[int, int]], context: int, horizon: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    span = context + 1 + horizon
    tokens = np.stack([sequences[i].tokens[s : s + span] for i, s in starts])
    actions = np.stack([sequences[i].actions[s : s + span] for i, s in starts]).reshape(len(starts), span, -1)
    proprios = np.stack([sequences[i].proprios[s : s + span] for i, s in starts]).reshape(len(starts), span, -1)
    return tokens, actions, proprios


def horizon_loss(
    model: TransitionModel,
    tokens: np.ndarray,
    actions: np.ndarray,
    proprios: np.ndarray,
    horizon: int,
) -> Tensor:
    """Latent consistency summed over ``horizon`` autoregressive steps.

    Inputs span context+1+horizon steps. Predictions are fed back as context;
    actions and proprios for future steps come from the data.
    """
    window = model.context + 1
    batch = tokens.shape[0]
    ctx_tokens: Tensor = Tensor(tokens[:, :window])
    total: Tensor | None = None
    for step in range(horizon):
        pred = model.forward(ctx_tokens, actions[:, step : step + window], proprios[:, step : step + window])
        term = ndmath.mean_squared_error(pred, tokens[:, window + step])
        total = term if total is None else total + term
        newest = pred.reshape(batch, 1, *pred.shape[1:])
        ctx_tokens = ndmath.concat([ctx_tokens[:, 1:], newest], axis=1)
    assert total is not None
    return total


@dataclass(slots=True)
class WorldModelFit:
    model: TransitionModel
    losses: list[float] = field(default_factory=list)
    held_out: list[float] = field(default_factory=list)

    def write_loss_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["epoch", "loss", "held_out_loss"])
            for epoch, loss in enumerate(self.losses, start=1):
                held = self.held_out[epoch - 1] if epoch - 1 < len(self.held_out) else ""
                writer.writerow([epoch, repr(loss), repr(held) if held != "" else ""])
        return path


def evaluate_horizon_loss(
    model: TransitionModel,
    sequences: Sequence[LatentSequence],
    horizon: int,
    *,
    batch_size: int = 64,
) -> float:
    starts = window_starts(sequences, model.context, horizon)
    if not starts:
        raise DatasetError("held-out episodes are shorter than one training window")
    total = 0.0
    with ndmath.no_grad():
        for first in range(0, len(starts), batch_size):
            chunk = starts[first : first + batch_size]
            loss = horizon_loss(model, *_gather(sequences, chunk, model.context, horizon), horizon)
            total += loss.item() * len(chunk)
    return total / len(starts)


def train_world_model(
    sequences: Sequence[LatentSequence],
    cfg: WorldModelConfig,
    *,
    seed: int,
    encoder: PatchEncoder | None = None,
    held_out: Sequence[LatentSequence] = (),
) -> WorldModelFit:
    if encoder is not None and not encoder.frozen:
        raise RuntimeError("encoder must be frozen before the transition model is trained")
    starts = window_starts(sequences, cfg.context, cfg.horizon)
    if not starts:
        raise DatasetError(
            f"no episode reaches the window length {cfg.context + 1 + cfg.horizon} (context + 1 + horizon)"
        )
    sample = sequences[0]
    model = TransitionModel.from_config(
        cfg,
        embed_dim=sample.tokens.shape[-1],
        action_dim=sample.actions.reshape(len(sample), -1).shape[1],
        proprio_dim=sample.proprios.reshape(len(sample), -1).shape[1],
        seed=seed,
    )
    optimizer = Adam(model.parameters(), lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)
    shuffle_rng = seeding.stream(seed, "shuffle.world_model")
    fit = WorldModelFit(model=model)

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(starts))
        epoch_loss = 0.0
        for first in range(0, len(order), cfg.batch_size):
            chunk = [starts[i] for i in order[first : first + cfg.batch_size]]
            loss = horizon_loss(model, *_gather(sequences, chunk, cfg.context, cfg.horizon), cfg.horizon)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item() * len(chunk)
        fit.losses.append(epoch_loss / len(starts))
        if held_out:
            fit.held_out.append(evaluate_horizon_loss(model, held_out, cfg.horizon, batch_size=cfg.batch_size))
        logger.info(
            "world_model_epoch epoch=%s loss=%.6f held_out=%s windows=%s",
            epoch,
            fit.losses[-1],
            f"{fit.held_out[-1]:.6f}" if fit.held_out else "-",
            len(starts),
        )
    return fit


def one_step_errors(
    model: TransitionModel, sequences: Sequence[LatentSequence], *, batch_size: int = 64
) -> np.ndarray:
    """Per-window mean squared token error of the one-step prediction."""
    starts = window_starts(sequences, model.context, 1)
    errors: list[np.ndarray] = []
    with ndmath.no_grad():
        for first in range(0, len(starts), batch_size):
            tokens, actions, proprios = _gather(sequences, starts[first : first + batch_size], model.context, 1)
            window = model.context + 1
            pred = model.forward(tokens[:, :window], actions[:, :window], proprios[:, :window]).data
            errors.append(np.mean((pred - tokens[:, window]) ** 2, axis=(1, 2)))
    return np.concatenate(errors) if errors else np.zeros((0,), dtype=np.float32)


def copy_baseline_errors(sequences: Sequence[LatentSequence], context: int) -> np.ndarray:
    """Same windows as ``one_step_errors``, predicting z_{t+1} := z_t."""
    starts = window_starts(sequences, context, 1)
    return np.array(
        [np.mean((sequences[i].tokens[s + context + 1] - sequences[i].tokens[s + context]) ** 2) for i, s in starts],
        dtype=np.float32,
    )


def rollout_errors(
    model: TransitionModel, sequences: Sequence[LatentSequence], horizon: int, *, limit: int | None = None
) -> np.ndarray:
    """(windows, horizon) mean squared token error of open-loop predictions."""
    starts = window_starts(sequences, model.context, horizon)[:limit]
    out = np.zeros((len(starts), horizon), dtype=np.float32)
    for row, (index, start) in enumerate(starts):
        seq = sequences[index]
        ctx = seq.window(start, model.context)
        future = slice(start + model.context + 1, start + model.context + 1 + horizon)
        predictions = rollout_latent(model, ctx, seq.actions[future], seq.proprios[future])
        for step, latent in enumerate(predictions):
            target = seq.tokens[start + model.context + 1 + step]
            out[row, step] = np.mean((latent.tokens - target) ** 2)
    return out
