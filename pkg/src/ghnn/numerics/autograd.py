"""Dense tensors with a dynamically recorded graph and exact reverse-mode gradients.

Every op computes its forward value with numpy and, when any input requires a
gradient, records a closure mapping the output cotangent to input cotangents.
:func:`backward` walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True

# Above this value of x/s the softplus switches to its asymptotic branch.
SOFTPLUS_THRESHOLD = 30.0


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (e.g. ``np.float64``)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        dtype = np.dtype(dtype) if dtype is not None else None
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def precision(self) -> str:
        return "extended" if self.data.dtype == np.float64 else "standard"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A trainable leaf tensor with an always-allocated gradient buffer."""

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype or _DEFAULT_DTYPE, name=name)
        self.data = np.array(self.data, copy=True)
        self.grad = np.zeros_like(self.data)


# ---------------------------------------------------------------------------
# graph plumbing


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise RuntimeError("cycle detected in recorded computation graph")
        state[key] = 1
        stack.append((node, True))
        for parent in node._parents:
            pmark = state.get(id(parent))
            if pmark == 1:
                raise RuntimeError("cycle detected in recorded computation graph")
            if pmark is None and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf requiring grad."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g.astype(node.dtype, copy=False)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError("matmul operands must have at least one dimension")
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def _bw(g):
        ad, bd, gd = a.data, b.data, g
        # promote vectors so the general rules apply, then restore shapes
        if ad.ndim == 1:
            ad = ad[None, :]
            gd = gd[..., None, :] if bd.ndim > 1 else gd[..., None]
        if bd.ndim == 1:
            bd = bd[:, None]
            gd = gd[..., None]
        ga = gd @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ gd
        if a.ndim == 1:
            ga = ga[..., 0, :]
        if b.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), _bw)


def dot(a, b) -> Tensor:
    """Inner product over the last axis (batched over leading axes)."""
    return tsum(mul(a, b), axis=-1)


def transpose(a: Tensor) -> Tensor:
    if a.ndim < 2:
        return a
    return _result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of an empty sequence")
    ref = ts[0].ndim
    for t in ts:
        if t.ndim != ref:
            raise ValueError("concat operands must have equal rank")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def _bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(out, ts, _bw)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    fancy = any(isinstance(i, (list, np.ndarray)) for i in (index if isinstance(index, tuple) else (index,)))

    def _bw(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _result(np.array(out, copy=True), (a,), _bw)


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def _bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (full,)

    return _result(out, (table,), _bw)


def segment_mean(table: Tensor, ids, segments, n_segments: int) -> Tensor:
    """Row ``k`` of the output is the mean of ``table[ids[segments == k]]``.

    Empty segments produce zero rows.
    """
    ids = np.asarray(ids, dtype=np.int64)
    segments = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(segments, minlength=n_segments).astype(table.dtype)
    scale = 1.0 / np.maximum(counts, 1.0)
    out = np.zeros((n_segments,) + table.shape[1:], dtype=table.dtype)
    np.add.at(out, segments, table.data[ids])
    out *= scale.reshape(-1, *([1] * (table.ndim - 1)))

    def _bw(g):
        rows = g[segments] * scale[segments].reshape(-1, *([1] * (table.ndim - 1)))
        full = np.zeros_like(table.data)
        np.add.at(full, ids, rows)
        return (full,)

    return _result(out, (table,), _bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), _bw)


def cumsum(a: Tensor, axis: int = -1) -> Tensor:
    out = np.cumsum(a.data, axis=axis)
    # d/dx_j of sum_i g_i * y_i = sum_{i >= j} g_i: a reversed running sum
    return _result(out, (a,), lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),))


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def mean_rows(a: Tensor) -> Tensor:
    return tmean(a, axis=0)


# ---------------------------------------------------------------------------
# nonlinearities


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def _softplus(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    big = y > SOFTPLUS_THRESHOLD
    safe = np.where(big, 0.0, y)
    return np.where(big, y + np.log1p(np.exp(-np.abs(y))), np.log1p(np.exp(safe)))


def _log_softplus(y: np.ndarray) -> np.ndarray:
    # log(log1p(e^y)); for very negative y, log1p(e^y) ~ e^y (1 - e^y / 2)
    y = np.asarray(y)
    small = y < -20.0
    sp = _softplus(np.where(small, 0.0, y))
    return np.where(small, y + np.log1p(-0.5 * np.exp(np.minimum(y, 0.0))), np.log(sp))


def scaled_softplus(a, s: float) -> Tensor:
    """``s * log(1 + exp(x / s))`` with an overflow-safe branch; output floored at the
    smallest positive normal so it stays strictly positive under underflow."""
    if not s > 0:
        raise ValueError(f"softplus scale must be positive, got {s}")
    a = as_tensor(a)
    y = a.data / s
    tiny = np.finfo(a.dtype).tiny
    out = np.maximum(s * _softplus(y), tiny).astype(a.dtype, copy=False)
    return _result(out, (a,), lambda g: (g * _sigmoid(y),))


def log_scaled_softplus(a, s: float) -> Tensor:
    """``log(scaled_softplus(x, s))`` evaluated without underflow for very negative x."""
    if not s > 0:
        raise ValueError(f"softplus scale must be positive, got {s}")
    a = as_tensor(a)
    y = a.data / s
    out = (np.log(s) + _log_softplus(y)).astype(a.dtype, copy=False)

    def _bw(g):
        small = y < -20.0
        sp = _softplus(np.where(small, 0.0, y))
        ratio = np.where(small, 1.0 - 0.5 * np.exp(np.minimum(y, 0.0)), _sigmoid(y) / sp)
        return (g * ratio / s,)

    return _result(out, (a,), _bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _result(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def global_grad_norm(params: Iterable[Parameter]) -> float:
    """Global L2 norm of the gradients of ``params``."""
    return float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params)))
