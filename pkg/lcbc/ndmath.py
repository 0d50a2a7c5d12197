"""Dense tensors with tape-based reverse-mode differentiation and Adam."""

from __future__ import annotations

import logging
import threading
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any

import numpy as np

logger = logging.getLogger("lcbc.ndmath")

DEFAULT_DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], tuple["np.ndarray | None", ...]]


class NumericError(RuntimeError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    def __init__(self, *, op: str, shapes: Sequence[tuple[int, ...]], detail: str = "") -> None:
        self.op = op
        self.shapes = [tuple(shape) for shape in shapes]
        rendered = ", ".join(str(shape) for shape in self.shapes)
        message = f"{op}: incompatible shapes {rendered}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class GraphError(RuntimeError):
    """Raised for invalid backward requests."""


class _Mode(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.dtype: type[np.floating[Any]] = DEFAULT_DTYPE


_mode = _Mode()


@contextmanager
def no_grad() -> Iterator[None]:
    previous = _mode.grad_enabled
    _mode.grad_enabled = False
    try:
        yield
    finally:
        _mode.grad_enabled = previous


@contextmanager
def default_dtype(dtype: type[np.floating[Any]]) -> Iterator[None]:
    """Switch the working precision for tensors created in this thread.

    Only gradient checks use this; training stays in float32.
    """
    previous = _mode.dtype
    _mode.dtype = dtype
    try:
        yield
    finally:
        _mode.dtype = previous


def current_dtype() -> type[np.floating[Any]]:
    return _mode.dtype


def _check_finite(op: str, data: np.ndarray) -> None:
    if not np.isfinite(data).all():
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NumericError(f"{op} produced {bad} non-finite value(s) in output of shape {data.shape}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "name", "_parents", "_backward")

    def __init__(self, data: Any, *, requires_grad: bool = False, name: str | None = None) -> None:
        array = np.array(data, dtype=_mode.dtype)
        _check_finite("tensor", array)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(op="item", shapes=[self.shape], detail="tensor is not scalar")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> dict[Tensor, np.ndarray]:
        return backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return mul(other, self)

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __truediv__(self, other: float) -> Tensor:
        if isinstance(other, Tensor):
            raise TypeError("Tensor division is only defined for scalar divisors")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        return slice_tensor(self, index)

    def tanh(self) -> Tensor:
        return tanh(self)

    def sigmoid(self) -> Tensor:
        return sigmoid(self)

    def relu_hinge(self) -> Tensor:
        return relu_hinge(self)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes or None)


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    data = np.asarray(data, dtype=_mode.dtype)
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    out.requires_grad = _mode.grad_enabled and any(parent.requires_grad for parent in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError as exc:
        raise ShapeError(op=op, shapes=[a.shape, b.shape], detail="not broadcastable") from exc


def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def _backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return _result("add", a.data + b.data, (a, b), _backward)


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def _backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)

    return _result("sub", a.data - b.data, (a, b), _backward)


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def _backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), _backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(op="matmul", shapes=[a.shape, b.shape], detail="operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(op="matmul", shapes=[a.shape, b.shape], detail="inner dimensions differ")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(op="matmul", shapes=[a.shape, b.shape], detail="batch dimensions differ") from exc

    def _backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_a = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result("matmul", np.matmul(a.data, b.data), (a, b), _backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * (1.0 - y * y),)

    return _result("tanh", y, (x,), _backward)


def _sigmoid_array(values: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * values))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_array(x.data)

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * y * (1.0 - y),)

    return _result("sigmoid", y, (x,), _backward)


def relu_hinge(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is 0."""
    x = as_tensor(x)
    active = x.data > 0

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * active,)

    return _result("relu_hinge", np.where(active, x.data, 0.0), (x,), _backward)


def softmax(x: Tensor, *, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``. ``mask`` (broadcastable, True = allowed) sends
    disallowed logits to -inf before normalisation."""
    logits = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, x.shape)
        except ValueError as exc:
            raise ShapeError(op="softmax", shapes=[x.shape, mask.shape], detail="mask not broadcastable") from exc
        allowed = np.broadcast_to(mask, x.shape)
        if not allowed.any(axis=axis).all():
            raise ShapeError(op="softmax", shapes=[x.shape, mask.shape], detail="a row has no allowed entries")
        with np.errstate(invalid="ignore"):
            logits = np.where(allowed, logits, -np.inf)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    exps = np.exp(shifted)
    y = exps / np.sum(exps, axis=axis, keepdims=True)

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        inner = np.sum(grad * y, axis=axis, keepdims=True)
        return (y * (grad - inner),)

    return _result("softmax", y, (x,), _backward)


def _normalise_axes(axis: int | tuple[int, ...] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(a % ndim for a in axes))


def sum_(x: Tensor, *, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    axes = _normalise_axes(axis, x.ndim)
    shape = x.shape

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        if not keepdims:
            grad = np.expand_dims(grad, axes) if axes else grad
        return (np.broadcast_to(grad, shape).copy(),)

    return _result("sum", np.sum(x.data, axis=axes, keepdims=keepdims), (x,), _backward)


def mean(x: Tensor, *, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    axes = _normalise_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    if count == 0:
        raise ShapeError(op="mean", shapes=[x.shape], detail="reduction over an empty axis")
    shape = x.shape

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        if not keepdims:
            grad = np.expand_dims(grad, axes) if axes else grad
        return (np.broadcast_to(grad / count, shape).copy(),)

    return _result("mean", np.mean(x.data, axis=axes, keepdims=keepdims), (x,), _backward)


def concat(tensors: Sequence[Tensor], *, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError(op="concat", shapes=[], detail="no inputs")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(op="concat", shapes=[t.shape for t in tensors], detail=f"axis={axis}")
    boundaries = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def _backward(grad: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(np.split(grad, boundaries, axis=ax))

    return _result("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, _backward)


def stack(tensors: Sequence[Tensor], *, axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


def slice_tensor(x: Tensor, index: Any) -> Tensor:
    shape = x.shape
    try:
        out = np.array(x.data[index])
    except IndexError as exc:
        raise ShapeError(op="slice", shapes=[shape], detail=str(exc)) from exc

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(shape, dtype=grad.dtype)
        np.add.at(full, index, grad)
        return (full,)

    return _result("slice", out, (x,), _backward)


def layer_norm(x: Tensor, *, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine part)."""
    centred = x.data - np.mean(x.data, axis=-1, keepdims=True)
    variance = np.mean(centred * centred, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(variance + eps)
    normed = centred * inv_std

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        mean_grad = np.mean(grad, axis=-1, keepdims=True)
        mean_grad_x = np.mean(grad * normed, axis=-1, keepdims=True)
        return (inv_std * (grad - mean_grad - normed * mean_grad_x),)

    return _result("layer_norm", normed, (x,), _backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(op="reshape", shapes=[original, tuple(shape)]) from exc

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad.reshape(original),)

    return _result("reshape", out, (x,), _backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    order = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in order) != list(range(x.ndim)):
        raise ShapeError(op="transpose", shapes=[x.shape], detail=f"axes={order}")
    inverse = tuple(np.argsort(order))

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.transpose(grad, inverse),)

    return _result("transpose", np.transpose(x.data, order), (x,), _backward)


def mean_squared_error(prediction: Tensor, target: Tensor | np.ndarray) -> Tensor:
    diff = sub(prediction, target)
    return mean(mul(diff, diff))


_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "relu_hinge": relu_hinge,
    "mean": mean,
    "sum": sum_,
    "concat": lambda *inputs, axis=0: concat(inputs, axis=axis),
    "slice": slice_tensor,
    "layer_norm": layer_norm,
    "reshape": reshape,
    "transpose": transpose,
}


def forward_op(op: str, *inputs: Any, **kwargs: Any) -> Tensor:
    try:
        fn = _OPS[op]
    except KeyError as exc:
        raise ValueError(f"Unknown op `{op}`; expected one of {sorted(_OPS)}") from exc
    return fn(*inputs, **kwargs)


@dataclass(slots=True)
class Graph:
    """Tape reachable from a root, in topological order (inputs first)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> Graph:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(nodes=order)

    def records(self) -> list[tuple[str, int, tuple[int, ...]]]:
        return [(node.op, id(node), tuple(id(p) for p in node._parents)) for node in self.nodes]

    def leaves(self) -> list[Tensor]:
        return [node for node in self.nodes if node.is_leaf and node.requires_grad]


def backward(root: Tensor, graph: Graph | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) into every requires_grad leaf's ``grad``."""
    if root.size != 1:
        raise GraphError(f"backward requires a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("backward called on a tensor that is detached from any graph")

    graph = graph or Graph.from_root(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaf_grads: dict[Tensor, np.ndarray] = {}

    for node in reversed(graph.nodes):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            grad = grad.astype(node.data.dtype, copy=False)
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            leaf_grads[node] = node.grad
            continue
        assert node._backward is not None
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    return leaf_grads


@dataclass(slots=True)
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(
        cls,
        params: Sequence[Tensor],
        *,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> AdamState:
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(
            op="adam_step",
            shapes=[(len(params),), (len(grads),), (len(state.m),)],
            detail="parameter, gradient and state counts differ",
        )
    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for index, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.data.shape or state.m[index].shape != param.data.shape:
            raise ShapeError(op="adam_step", shapes=[param.shape, grad.shape, state.m[index].shape])
        m = state.beta1 * state.m[index] + (1.0 - state.beta1) * grad
        v = state.beta2 * state.v[index] + (1.0 - state.beta2) * grad * grad
        state.m[index] = m.astype(param.data.dtype)
        state.v[index] = v.astype(param.data.dtype)
        m_hat = state.m[index] / correction1
        v_hat = state.v[index] / correction2
        update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        param.data -= update.astype(param.data.dtype)
        _check_finite("adam_step", param.data)
    return state


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for param in params:
        if param.grad is not None:
            total += float(np.sum(param.grad.astype(np.float64) ** 2))
    norm = total**0.5
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for param in params:
            if param.grad is not None:
                param.grad = (param.grad * scale).astype(param.data.dtype)
    return norm


class Adam:
    def __init__(
        self,
        params: Sequence[Tensor],
        *,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        max_grad_norm: float = 0.0,
    ) -> None:
        self.params = list(params)
        self.max_grad_norm = max_grad_norm
        self.state = AdamState.for_params(self.params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for param in self.params:
            param.grad = None

    def step(self) -> float:
        norm = clip_grad_norm(self.params, self.max_grad_norm)
        adam_step(self.params, [p.grad for p in self.params], self.state)
        return norm


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, *, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar ``fn`` with respect to ``param``."""
    grad = np.zeros(param.shape, dtype=np.float64)
    flat = param.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            upper = fn().item()
            flat[i] = original - h
            lower = fn().item()
            flat[i] = original
            grad.reshape(-1)[i] = (upper - lower) / (2.0 * h)
    return grad
