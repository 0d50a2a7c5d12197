from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np
import pytest

from lcbc import encoder as enc
from lcbc.checkpoint import CheckpointError
from lcbc.config import RenderConfig
from lcbc.envs import EnvParams, PendulumState, render
from lcbc.ndmath import ShapeError

SMALL = enc.EncoderGeometry(height=16, width=16, patch=4, embed_dim=8, depth=1, heads=2)
PARAMS = EnvParams(render=RenderConfig(width=16, height=16))


def _corpus(count: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    states = [PendulumState(float(rng.uniform(-math.pi, math.pi)), 0.0) for _ in range(count)]
    return np.stack([render(state, PARAMS) for state in states])


def test_default_geometry_token_shape() -> None:
    geometry = enc.EncoderGeometry(height=64, width=64, patch=8, embed_dim=64, depth=0, heads=4)
    model = enc.build_encoder(geometry, seed=0)
    frame = render(PendulumState(0.0, 0.0), EnvParams())
    latent = model.encode(frame)
    assert latent.tokens.shape == (64, 64)
    assert latent.pooled.shape == (64,)
    assert np.allclose(latent.pooled, latent.tokens.mean(axis=0))


def test_encode_is_deterministic_and_batch_consistent() -> None:
    model = enc.build_encoder(SMALL, seed=3).freeze()
    frames = _corpus(5)
    first = model.encode(frames[0])
    second = model.encode(frames[0])
    assert first.tokens.tobytes() == second.tokens.tobytes()
    batch = model.encode_batch(frames, batch_size=2)
    assert batch.shape == (5, SMALL.num_patches, SMALL.embed_dim)
    assert np.allclose(batch[0], first.tokens, atol=1e-6)


def test_geometry_and_frame_dims_are_checked() -> None:
    with pytest.raises(ShapeError, match="divisible"):
        enc.EncoderGeometry(height=16, width=18, patch=4, embed_dim=8)
    model = enc.build_encoder(SMALL, seed=0)
    with pytest.raises(ShapeError, match="frame dims differ"):
        model.encode(np.zeros((32, 32, 3), dtype=np.uint8))


def test_patchify_layout_and_scale() -> None:
    frame = np.zeros((4, 4, 3), dtype=np.uint8)
    frame[:2, 2:] = 255
    patches = enc.patchify(frame, 2)
    assert patches.shape == (1, 4, 12)
    assert np.all(patches[0, 1] == 0.5)
    assert np.all(patches[0, 0] == -0.5)


def test_freeze_turns_off_gradients() -> None:
    model = enc.build_encoder(SMALL, seed=0)
    assert not model.frozen
    model.freeze()
    assert model.frozen
    assert not model.forward(_corpus(1)).requires_grad


def test_pretraining_reduces_loss_and_is_reproducible() -> None:
    corpus = _corpus(48)
    kwargs = dict(epochs=4, batch_size=16, lr=5e-3, decoder_hidden=16, seed=1)
    first = enc.fit_autoencoder(corpus, SMALL, **kwargs)
    second = enc.fit_autoencoder(corpus, SMALL, **kwargs)
    assert len(first.losses) == 4
    assert first.losses[-1] < first.losses[0]
    for (name, a), (_, b) in zip(first.encoder.named_parameters(), second.encoder.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes(), name


def test_pretraining_rejects_empty_corpus() -> None:
    with pytest.raises(enc.EncoderError, match="non-empty"):
        enc.fit_autoencoder(np.zeros((0, 16, 16, 3), dtype=np.uint8), SMALL, epochs=1, batch_size=4, lr=1e-3, decoder_hidden=4, seed=0)


def test_export_import_round_trip(tmp_path: Path) -> None:
    model = enc.build_encoder(SMALL, seed=5).freeze()
    path = enc.export_encoder(model, tmp_path / "encoder.lcbc")
    loaded = enc.import_encoder(path, SMALL)
    assert loaded.frozen
    frames = _corpus(3)
    assert model.encode_batch(frames).tobytes() == loaded.encode_batch(frames).tobytes()


def test_import_reports_missing_and_mismatched_tensors(tmp_path: Path) -> None:
    model = enc.build_encoder(SMALL, seed=5)
    path = enc.export_encoder(model, tmp_path / "encoder.lcbc")
    payload = path.read_bytes()
    truncated = tmp_path / "truncated.lcbc"
    truncated.write_bytes(payload[: len(payload) - 10])
    with pytest.raises(CheckpointError, match="missing tensor `norm.shift`"):
        enc.import_encoder(truncated, SMALL)

    wider = enc.EncoderGeometry(height=16, width=16, patch=4, embed_dim=12, depth=1, heads=2)
    with pytest.raises(CheckpointError, match="has shape"):
        enc.import_encoder(path, wider)


@pytest.mark.slow
@pytest.mark.skipif(os.environ.get("LCBC_RUN_SLOW") != "1", reason="set LCBC_RUN_SLOW=1")
def test_pretrained_encoder_beats_mean_frame_and_separates_extremes() -> None:
    corpus = _corpus(400, seed=0)
    held_out = _corpus(100, seed=1)
    fit = enc.fit_autoencoder(corpus, SMALL, epochs=60, batch_size=32, lr=3e-3, decoder_hidden=32, seed=0)
    assert fit.reconstruction_mse(held_out) < enc.mean_frame_mse(corpus, held_out)

    model = fit.encoder.freeze()
    up = model.encode(render(PendulumState(0.0, 0.0), PARAMS)).pooled
    down = model.encode(render(PendulumState(math.pi, 0.0), PARAMS)).pooled
    cosine = float(np.dot(up, down) / (np.linalg.norm(up) * np.linalg.norm(down)))
    assert cosine < 0.99
