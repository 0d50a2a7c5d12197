"""Observation model: RGB frame → patch-token latent.

The encoder is pretrained as a patch autoencoder on the random-rollout corpus,
then frozen. Externally produced weights can be loaded with ``import_encoder``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lcbc import checkpoint, ndmath, seeding
from lcbc.config import Settings
from lcbc.layers import MLP, LayerNorm, Linear, Module, TransformerBlock, sinusoidal_encoding_2d
from lcbc.ndmath import Adam, ShapeError, Tensor

logger = logging.getLogger("lcbc.encoder")


class EncoderError(RuntimeError):
    pass


@dataclass(frozen=True, slots=True)
class EncoderGeometry:
    height: int
    width: int
    patch: int
    embed_dim: int
    depth: int = 1
    heads: int = 4

    def __post_init__(self) -> None:
        if self.height % self.patch or self.width % self.patch:
            raise ShapeError(
                op="encoder",
                shapes=[(self.height, self.width), (self.patch, self.patch)],
                detail="image dims must be divisible by the patch size",
            )

    @classmethod
    def from_settings(cls, settings: Settings) -> EncoderGeometry:
        return cls(
            height=settings.render.height,
            width=settings.render.width,
            patch=settings.patch,
            embed_dim=settings.encoder.embed_dim,
            depth=settings.encoder.depth,
            heads=settings.encoder.heads,
        )

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def num_patches(self) -> int:
        rows, cols = self.grid
        return rows * cols

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3


@dataclass(frozen=True, slots=True)
class Latent:
    tokens: np.ndarray
    pooled: np.ndarray

    @classmethod
    def from_tokens(cls, tokens: np.ndarray) -> Latent:
        tokens = np.asarray(tokens, dtype=np.float32)
        return cls(tokens=tokens, pooled=pool(tokens))


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """(N, H, W, 3) uint8 → (N, P, patch*patch*3) float32 in [-0.5, 0.5]."""
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[None]
    n, height, width, channels = frames.shape
    rows, cols = height // patch, width // patch
    scaled = frames.astype(np.float32) / 255.0 - 0.5
    blocks = scaled.reshape(n, rows, patch, cols, patch, channels).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(blocks.reshape(n, rows * cols, patch * patch * channels))


def pool(tokens: np.ndarray) -> np.ndarray:
    return np.asarray(tokens, dtype=np.float32).mean(axis=-2)


class PatchEncoder(Module):
    def __init__(self, geometry: EncoderGeometry, rng: np.random.Generator) -> None:
        self.geometry = geometry
        self.embed = Linear(geometry.patch_dim, geometry.embed_dim, rng)
        self.blocks = [TransformerBlock(geometry.embed_dim, geometry.heads, rng) for _ in range(geometry.depth)]
        self.norm = LayerNorm(geometry.embed_dim)
        rows, cols = geometry.grid
        self._position = sinusoidal_encoding_2d(rows, cols, geometry.embed_dim).astype(np.float32)

    @property
    def frozen(self) -> bool:
        return not any(param.requires_grad for param in self.parameters())

    def freeze(self) -> PatchEncoder:
        self.set_trainable(False)
        return self

    def _check_frames(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames)
        if frames.ndim == 3:
            frames = frames[None]
        g = self.geometry
        if frames.ndim != 4 or frames.shape[1:] != (g.height, g.width, 3):
            raise ShapeError(op="encode", shapes=[frames.shape, (g.height, g.width, 3)], detail="frame dims differ")
        return frames

    def forward(self, frames: np.ndarray) -> Tensor:
        frames = self._check_frames(frames)
        patches = Tensor(patchify(frames, self.geometry.patch))
        hidden = self.embed(patches) + self._position
        for block in self.blocks:
            hidden = block(hidden)
        return self.norm(hidden)

    def encode(self, frame: np.ndarray) -> Latent:
        with ndmath.no_grad():
            tokens = self.forward(frame).data[0]
        return Latent.from_tokens(tokens)

    def encode_batch(self, frames: np.ndarray, *, batch_size: int = 256) -> np.ndarray:
        """Token grids for a stack of frames, shape (N, P, E)."""
        frames = self._check_frames(frames)
        out = np.empty((frames.shape[0], self.geometry.num_patches, self.geometry.embed_dim), dtype=np.float32)
        with ndmath.no_grad():
            for start in range(0, frames.shape[0], batch_size):
                out[start : start + batch_size] = self.forward(frames[start : start + batch_size]).data
        return out


def build_encoder(geometry: EncoderGeometry, seed: int) -> PatchEncoder:
    return PatchEncoder(geometry, seeding.stream(seed, "init.encoder"))


@dataclass(slots=True)
class AutoencoderFit:
    encoder: PatchEncoder
    decoder: MLP
    losses: list[float] = field(default_factory=list)

    def reconstruction_mse(self, frames: np.ndarray, *, batch_size: int = 256) -> float:
        total, count = 0.0, 0
        with ndmath.no_grad():
            for start in range(0, len(frames), batch_size):
                batch = frames[start : start + batch_size]
                target = patchify(batch, self.encoder.geometry.patch)
                pred = self.decoder(self.encoder.forward(batch)).data
                total += float(np.sum((pred - target) ** 2))
                count += target.size
        return total / count


def mean_frame_mse(corpus: np.ndarray, frames: np.ndarray) -> float:
    """MSE of predicting every frame by the corpus mean frame (same pixel scaling as patchify)."""
    mean = corpus.astype(np.float64).mean(axis=0) / 255.0
    return float(np.mean((frames.astype(np.float64) / 255.0 - mean) ** 2))


def fit_autoencoder(
    corpus: np.ndarray,
    geometry: EncoderGeometry,
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    decoder_hidden: int,
    seed: int,
    max_frames: int | None = None,
) -> AutoencoderFit:
    corpus = np.asarray(corpus)
    if corpus.ndim != 4 or corpus.shape[0] == 0:
        raise EncoderError("encoder pretraining needs a non-empty (N, H, W, 3) frame corpus")
    if max_frames is not None and corpus.shape[0] > max_frames:
        pick = np.sort(seeding.stream(seed, "subsample.encoder").choice(corpus.shape[0], max_frames, replace=False))
        corpus = corpus[pick]

    encoder = build_encoder(geometry, seed)
    init_rng = seeding.stream(seed, "init.decoder")
    decoder = MLP([geometry.embed_dim, decoder_hidden, geometry.patch_dim], init_rng)
    optimizer = Adam(encoder.parameters() + decoder.parameters(), lr=lr, max_grad_norm=1.0)
    shuffle_rng = seeding.stream(seed, "shuffle.encoder")
    fit = AutoencoderFit(encoder=encoder, decoder=decoder)

    for epoch in range(1, epochs + 1):
        order = shuffle_rng.permutation(corpus.shape[0])
        epoch_loss, batches = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = corpus[order[start : start + batch_size]]
            target = patchify(batch, geometry.patch)
            loss = ndmath.mean_squared_error(decoder(encoder.forward(batch)), target)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
            batches += 1
        fit.losses.append(epoch_loss / max(batches, 1))
        logger.info("encoder_pretrain_epoch epoch=%s loss=%.6f frames=%s", epoch, fit.losses[-1], corpus.shape[0])
    return fit


def pretrain_encoder(corpus: np.ndarray, settings: Settings) -> PatchEncoder:
    cfg = settings.encoder
    fit = fit_autoencoder(
        corpus,
        EncoderGeometry.from_settings(settings),
        epochs=cfg.pretrain_epochs,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        decoder_hidden=cfg.decoder_hidden,
        seed=settings.seed,
        max_frames=cfg.pretrain_max_frames,
    )
    return fit.encoder.freeze()


def export_encoder(encoder: PatchEncoder, path: Path) -> Path:
    return checkpoint.save_tensors(path, encoder.state_dict())


def import_encoder(path: Path, geometry: EncoderGeometry) -> PatchEncoder:
    """Load LCBC weights into a frozen encoder of the configured geometry."""
    tensors = checkpoint.load_tensors(path, allow_truncated=True)
    encoder = PatchEncoder(geometry, np.random.default_rng(0))
    expected = {name: param.shape for name, param in encoder.named_parameters()}
    checkpoint.require_tensors(tensors, expected, source=str(path))
    encoder.load_state_dict(tensors, source=str(path))
    logger.info("encoder_imported path=%s tensors=%s", path, len(expected))
    return encoder.freeze()
