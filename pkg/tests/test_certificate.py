from __future__ import annotations

import numpy as np
import pytest

from lcbc import certificate as cert
from lcbc.certificate import BarrierHyper, BarrierNet, LossInputError, PairBatch
from lcbc.config import BarrierConfig
from lcbc.ndmath import ShapeError, Tensor


def test_barrier_output_shapes_and_determinism() -> None:
    barrier = BarrierNet.from_config(BarrierConfig(hidden=[8, 8]), embed_dim=4, seed=0)
    z = np.random.default_rng(0).normal(size=(5, 4)).astype(np.float32)
    batch = cert.barrier_value(barrier, z)
    assert batch.shape == (5,)
    single = cert.barrier_value(barrier, z[2])
    assert isinstance(single, float)
    assert single == pytest.approx(float(batch[2]), abs=1e-6)
    assert cert.barrier_value(barrier, z[2]) == single
    with pytest.raises(ShapeError, match="barrier"):
        barrier(np.zeros((2, 3), dtype=np.float32))


def test_same_seed_same_initialisation() -> None:
    a = BarrierNet.from_config(BarrierConfig(), embed_dim=4, seed=9)
    b = BarrierNet.from_config(BarrierConfig(), embed_dim=4, seed=9)
    for (_, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
        assert x.data.tobytes() == y.data.tobytes()


def test_segregation_loss_examples() -> None:
    safe, unsafe = np.array([-1.0, 0.5]), np.array([0.2, -0.3])
    assert cert.segregation_loss(safe, unsafe, BarrierHyper(gamma=0.0)).item() == pytest.approx(0.8)
    assert cert.segregation_loss(safe, unsafe, BarrierHyper(gamma=0.1)).item() == pytest.approx(1.0)
    zeros = np.zeros(3)
    assert cert.segregation_loss(zeros, zeros, BarrierHyper(gamma=0.0)).item() == 0.0
    weighted = cert.segregation_loss(safe, unsafe, BarrierHyper(xi1=2.0, xi2=3.0, gamma=0.0)).item()
    assert weighted == pytest.approx(2.0 * 0.5 + 3.0 * 0.3)


def test_segregation_loss_rejects_empty_batches() -> None:
    with pytest.raises(LossInputError, match="safe batch is empty"):
        cert.segregation_loss(np.zeros(0), np.ones(2), BarrierHyper())
    barrier = BarrierNet(4, [4], np.random.default_rng(0))
    with pytest.raises(LossInputError, match="unsafe batch"):
        cert.barrier_loss(barrier, np.zeros((2, 4)), np.zeros((0, 4)), BarrierHyper())


def test_hyperparameters_are_validated() -> None:
    with pytest.raises(ValueError, match="xi1"):
        BarrierHyper(xi1=0.0)
    with pytest.raises(ValueError, match="alpha"):
        BarrierHyper(alpha=-1.0)
    with pytest.raises(ValueError, match="gamma"):
        BarrierHyper(gamma=-0.1)
    assert BarrierHyper.from_config(BarrierConfig(gamma=0.0)).gamma == 0.0


def test_lie_terms_examples() -> None:
    empty = np.zeros(0)
    safe_rising = cert.lie_terms(np.array([-0.5]), np.array([-0.2]), empty, empty, alpha=1.0)
    assert safe_rising.item() == pytest.approx(0.3)
    safe_falling = cert.lie_terms(np.array([-0.2]), np.array([-0.5]), empty, empty, alpha=1.0)
    assert safe_falling.item() == 0.0
    unsafe_falling = cert.lie_terms(empty, empty, np.array([0.4]), np.array([0.1]), alpha=1.0)
    assert unsafe_falling.item() == pytest.approx(0.3)
    both = cert.lie_terms(np.array([-0.5]), np.array([-0.2]), np.array([0.4]), np.array([0.1]), alpha=1.0)
    assert both.item() == pytest.approx(0.6)


def test_lie_loss_validates_pairs() -> None:
    barrier = BarrierNet(4, [4], np.random.default_rng(0))
    z = np.random.default_rng(1).normal(size=(3, 4)).astype(np.float32)
    crossing = PairBatch(current=z[:1], following=z[1:2], trajectory=np.array([[0, 1]]), steps=np.array([[9, 0]]))
    with pytest.raises(LossInputError, match="crosses a trajectory boundary"):
        cert.lie_loss(barrier, crossing, PairBatch.empty(4), BarrierHyper())
    gap = PairBatch(current=z[:1], following=z[1:2], trajectory=np.array([[0, 0]]), steps=np.array([[2, 4]]))
    with pytest.raises(LossInputError, match="not consecutive"):
        cert.lie_loss(barrier, PairBatch.empty(4), gap, BarrierHyper())
    with pytest.raises(LossInputError, match="at least one"):
        cert.lie_loss(barrier, PairBatch.empty(4), PairBatch.empty(4), BarrierHyper())

    ok = PairBatch(current=z[:2], following=z[1:3], trajectory=np.zeros((2, 2)), steps=np.array([[0, 1], [1, 2]]))
    value = cert.lie_loss(barrier, ok, PairBatch.empty(4), BarrierHyper()).item()
    b = cert.barrier_value(barrier, z)
    assert value == pytest.approx(max(0.0, b[1] - b[0]) + max(0.0, b[2] - b[1]), abs=1e-6)


def test_barrier_loss_gradient_reaches_parameters() -> None:
    barrier = BarrierNet(4, [8], np.random.default_rng(0))
    rng = np.random.default_rng(2)
    loss = cert.barrier_loss(barrier, rng.normal(size=(6, 4)), rng.normal(size=(6, 4)), BarrierHyper(gamma=5.0))
    assert loss.item() > 0
    loss.backward()
    assert all(param.grad is not None for param in barrier.parameters())
    assert isinstance(loss, Tensor)
