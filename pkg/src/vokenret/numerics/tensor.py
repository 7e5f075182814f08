"""Dense tensors with a reverse-mode tape.

The surface is deliberately small: the handful of forward ops needed by the
quantizer, the sequence model, and their losses. Every op computes plain
numpy on ``Tensor.data`` and, when a :class:`Graph` is active and some input
requires gradients, appends a backward closure to the tape. Forward execution
order is a topological order, so backpropagation is a single reverse sweep
that visits each recorded node exactly once.

Precision is a dynamic setting: float32 for training, float64 under
:func:`verification_mode` so finite-difference checks have headroom.
Softmax-family ops accept a boolean exclusion mask instead of -inf logits;
masked positions get probability exactly zero and contribute no gradient.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ShapeError, UsageError

_DTYPE_STACK: list[np.dtype] = [np.dtype(np.float32)]
_DEBUG_STACK: list[bool] = [False]


def default_dtype() -> np.dtype:
    return _DTYPE_STACK[-1]


def debug_checks_enabled() -> bool:
    return _DEBUG_STACK[-1]


@contextlib.contextmanager
def precision(dtype):
    """Set the default dtype for tensors created inside the block."""
    _DTYPE_STACK.append(np.dtype(dtype))
    try:
        yield
    finally:
        _DTYPE_STACK.pop()


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    """Check every op output for NaN when enabled."""
    _DEBUG_STACK.append(bool(enabled))
    try:
        yield
    finally:
        _DEBUG_STACK.pop()


@contextlib.contextmanager
def verification_mode():
    """float64 plus per-op NaN checks; the mode gradient checks run under."""
    with precision(np.float64), debug_checks(True):
        yield


class Tensor:
    """A shaped block of finite reals, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; everything funnels through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, dtype=None) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Graph:
    """Ordered tape of forward ops with their backward closures.

    A graph is confined to one logical execution context. Entering pushes it
    onto the ambient stack; ops record onto the innermost active graph. A
    ``None`` entry (pushed by :func:`no_grad`) suppresses recording.
    """

    _stack: list[Optional["Graph"]] = []

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Graph":
        Graph._stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = Graph._stack.pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    @classmethod
    def current(cls) -> Optional["Graph"]:
        return cls._stack[-1] if cls._stack else None


@contextlib.contextmanager
def no_grad():
    """Suppress tape recording inside the block."""
    Graph._stack.append(None)
    try:
        yield
    finally:
        Graph._stack.pop()


def _record(out: Tensor, inputs: Sequence, backward: Callable) -> Tensor:
    if debug_checks_enabled() and np.isnan(out.data).any():
        raise UsageError("op produced NaN output")
    graph = Graph.current()
    if graph is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    ):
        out.requires_grad = True
        graph._nodes.append((out, tuple(inputs), backward))
    return out


def backpropagate(graph: Graph, loss: Tensor, params: Optional[dict] = None) -> None:
    """Populate ``.grad`` on every tensor that influenced the scalar loss.

    Parameters passed via ``params`` that the loss never touched get an
    explicit zero gradient.
    """
    if loss.size != 1:
        raise UsageError(f"backpropagate needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, inputs, backward in reversed(graph._nodes):
        if out.grad is None:
            continue
        grads = backward(out.grad)
        for t, g in zip(inputs, grads):
            if not isinstance(t, Tensor) or not t.requires_grad or g is None:
                continue
            if t.grad is None:
                t.grad = g.astype(t.data.dtype, copy=False)
            else:
                t.grad = t.grad + g
    if params:
        for p in params.values():
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} vs {b.shape}")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} vs {b.shape}")

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} vs {b.shape}")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    out = Tensor(a.data * s)

    def backward(g):
        return (g * s,)

    return _record(out, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} vs {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def backward(g):
        # Batched input against a 2-D weight is the hot path; fold the batch
        # into one GEMM instead of materializing per-sample weight grads.
        if b.ndim == 2 and a.ndim > 2:
            k, n = b.shape
            ga = np.matmul(g, b.data.T)
            gb = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n))
            return ga, gb
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), backward)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _record(out, (a,), backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(tuple(shape)))

    def backward(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), backward)


def repeat_rows(a, k: int) -> Tensor:
    """Repeat each leading-axis row k times; backward sums the copies."""
    a = _as_tensor(a)
    out = Tensor(np.repeat(a.data, k, axis=0))

    def backward(g):
        return (g.reshape((a.shape[0], k) + a.shape[1:]).sum(axis=1),)

    return _record(out, (a,), backward)


def gather_rows(table, ids) -> Tensor:
    """Select rows of ``table`` (embedding lookup); grads scatter-add back."""
    table = _as_tensor(table)
    idx = np.asarray(ids)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise UsageError(
            f"gather_rows: index out of range for table with {table.shape[0]} rows"
        )
    out = Tensor(table.data[idx])

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(out, (table,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0))

    def backward(g):
        return (g * (a.data > 0),)

    return _record(out, (a,), backward)


def _masked(x: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    if mask is None:
        return x
    m = np.broadcast_to(mask, x.shape)
    if m.all(axis=-1).any():
        raise UsageError("mask excludes every entry of a row")
    return np.where(m, -np.inf, x)


def softmax(a, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; ``mask`` entries (True) are excluded."""
    a = _as_tensor(a)
    x = _masked(a.data, mask)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    denom = e.sum(axis=-1, keepdims=True)
    p = e / denom
    out = Tensor(p)

    def backward(g):
        if mask is not None:
            g = np.where(np.broadcast_to(mask, g.shape), 0.0, g)
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _record(out, (a,), backward)


def log_softmax(a, mask: Optional[np.ndarray] = None) -> Tensor:
    """Log-softmax over the last axis; masked positions come back as -inf."""
    a = _as_tensor(a)
    x = _masked(a.data, mask)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    denom = e.sum(axis=-1, keepdims=True)
    out_data = x - (m + np.log(denom))
    p = e / denom
    out = Tensor(out_data)

    def backward(g):
        if mask is not None:
            g = np.where(np.broadcast_to(mask, g.shape), 0.0, g)
        tot = g.sum(axis=-1, keepdims=True)
        return (g - p * tot,)

    return _record(out, (a,), backward)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    if gain.shape != a.shape[-1:] or bias.shape != a.shape[-1:]:
        raise ShapeError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match feature dim of {a.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backward(g):
        dgain = _unbroadcast(g * xhat, gain.shape)
        dbias = _unbroadcast(g, bias.shape)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _record(out, (a, gain, bias), backward)


def squared_l2(a) -> Tensor:
    """Sum of squares over the last axis (per-sample squared L2 norm)."""
    a = _as_tensor(a)
    out = Tensor((a.data * a.data).sum(axis=-1))

    def backward(g):
        return (2.0 * a.data * np.expand_dims(g, -1),)

    return _record(out, (a,), backward)


def mean(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.mean())

    def backward(g):
        return (np.full(a.shape, float(g) / a.size, dtype=a.data.dtype),)

    return _record(out, (a,), backward)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum())

    def backward(g):
        return (np.full(a.shape, float(g), dtype=a.data.dtype),)

    return _record(out, (a,), backward)


def cross_entropy(logits, target_ids, mask: Optional[np.ndarray] = None) -> Tensor:
    """Negative log-likelihood of ``target_ids`` under last-axis softmax.

    ``target_ids`` has the logits' shape minus the class axis; the result has
    that same shape. Stable: computed through log-softmax.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(target_ids, dtype=np.intp)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise UsageError("cross_entropy: target id out of vocabulary range")
    x = _masked(logits.data, mask)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    denom = e.sum(axis=-1, keepdims=True)
    logp = x - (m + np.log(denom))
    p = e / denom
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out = Tensor(-picked)

    def backward(g):
        grad = p.copy()
        np.subtract.at(grad.reshape(-1, grad.shape[-1]),
                       (np.arange(targets.size), targets.reshape(-1)), 1.0)
        return (grad * np.expand_dims(g, -1),)

    return _record(out, (logits,), backward)


def stop_gradient(a) -> Tensor:
    """Pass the value through, block the gradient."""
    a = _as_tensor(a)
    return Tensor(a.data)
