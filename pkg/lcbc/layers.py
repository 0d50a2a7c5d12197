from __future__ import annotations

import math
from collections.abc import Iterator, Sequence

import numpy as np

from lcbc import ndmath
from lcbc.ndmath import ShapeError, Tensor


class Module:
    """Container of named parameters and sub-modules.

    Parameter names are dotted paths (``blocks.0.attn.wq.weight``) and double as
    tensor names in LCBC checkpoints.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                if value.name == "param":
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{index}.")

    def parameters(self) -> list[Tensor]:
        return [param for _, param in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], *, source: str = "state") -> None:
        expected = dict(self.named_parameters())
        for name, param in expected.items():
            if name not in state:
                raise KeyError(f"{source} is missing tensor `{name}`")
            value = np.asarray(state[name])
            if value.shape != param.data.shape:
                raise ShapeError(
                    op=f"load:{name}",
                    shapes=[param.data.shape, value.shape],
                    detail=f"{source} shape differs from configured shape",
                )
            param.data[...] = value.astype(param.data.dtype)

    def set_trainable(self, trainable: bool) -> None:
        for param in self.parameters():
            param.requires_grad = trainable
            param.grad = None

    def num_parameters(self) -> int:
        return sum(param.size for param in self.parameters())


def parameter(values: np.ndarray) -> Tensor:
    return Tensor(values, requires_grad=True, name="param")


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, *, scale: float = 1.0) -> None:
        limit = scale * math.sqrt(6.0 / (in_dim + out_dim))
        self.weight = parameter(rng.uniform(-limit, limit, size=(in_dim, out_dim)))
        self.bias = parameter(np.zeros((out_dim,)))
        self.in_dim = in_dim
        self.out_dim = out_dim

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(op="linear", shapes=[x.shape, self.weight.shape], detail="last axis must equal in_dim")
        if x.ndim == 1:
            x = x.reshape(1, self.in_dim)
            return (x @ self.weight + self.bias).reshape(self.out_dim)
        return x @ self.weight + self.bias


class MLP(Module):
    """tanh hidden layers, linear output layer."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, *, final_scale: float = 1.0) -> None:
        if len(sizes) < 2:
            raise ValueError("MLP needs at least an input and an output size")
        last = len(sizes) - 2
        self.layers = [
            Linear(sizes[i], sizes[i + 1], rng, scale=final_scale if i == last else 1.0) for i in range(len(sizes) - 1)
        ]

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = ndmath.tanh(layer(x))
        return self.layers[-1](x)


class LayerNorm(Module):
    def __init__(self, dim: int) -> None:
        self.gain = parameter(np.ones((dim,)))
        self.shift = parameter(np.zeros((dim,)))

    def __call__(self, x: Tensor) -> Tensor:
        return ndmath.layer_norm(x) * self.gain + self.shift


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator) -> None:
        if dim % heads:
            raise ValueError(f"model dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng, scale=0.5)

    def _split(self, x: Tensor) -> Tensor:
        batch, tokens, _ = x.shape
        return x.reshape(batch, tokens, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        batch, tokens, dim = x.shape
        q = self._split(self.wq(x))
        k = self._split(self.wk(x))
        v = self._split(self.wv(x))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.head_dim))
        weights = ndmath.softmax(scores, axis=-1, mask=mask)
        mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, tokens, dim)
        return self.wo(mixed)


class TransformerBlock(Module):
    """Pre-norm self-attention block with a tanh feed-forward."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, *, ff_mult: int = 2) -> None:
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff = MLP([dim, ff_mult * dim, dim], rng, final_scale=0.5)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), mask=mask)
        return x + self.ff(self.norm2(x))


def sinusoidal_encoding(positions: int, dim: int, *, base: float = 10000.0) -> np.ndarray:
    position = np.arange(positions, dtype=np.float64)[:, None]
    freq = np.exp(-math.log(base) * (np.arange(0, dim, 2, dtype=np.float64) / dim))
    table = np.zeros((positions, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(position * freq)
    table[:, 1::2] = np.cos(position * freq[: dim // 2])
    return table


def sinusoidal_encoding_2d(rows: int, cols: int, dim: int) -> np.ndarray:
    """Row encoding on the first half of ``dim``, column encoding on the second."""
    if dim % 4:
        raise ValueError(f"2-D position encoding needs dim divisible by 4, got {dim}")
    half = dim // 2
    row_table = sinusoidal_encoding(rows, half)
    col_table = sinusoidal_encoding(cols, half)
    grid = np.zeros((rows, cols, dim), dtype=np.float64)
    grid[:, :, :half] = row_table[:, None, :]
    grid[:, :, half:] = col_table[None, :, :]
    return grid.reshape(rows * cols, dim)
