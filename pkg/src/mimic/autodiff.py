"""Tape-based reverse-mode automatic differentiation over NumPy arrays.

Operations run eagerly. While a :class:`Tape` is active, every operation with
at least one gradient-requiring input is appended to it; ``tape.backward``
then walks the record in reverse, so each node is visited exactly once and
after all of its consumers. Gradients add up across fan-out.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ShapeMismatch

_state = threading.local()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, key):
        return getitem(self, key)


class Tape:
    """Ordered record of ``(output, inputs, backward_fn)`` nodes."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor, grad=None):
        if loss.data.size != 1 and grad is None:
            raise ShapeMismatch("backward from a non-scalar needs an explicit upstream gradient")
        loss.grad = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=np.float64)
        for out, inputs, fn in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                inp.grad = g if inp.grad is None else inp.grad + g


def _tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class BranchRecorder:
    """Collects the branch taken by every piecewise primitive while active.

    Two evaluations with equal records ran through the same smooth pieces,
    which is what finite-difference checks need to know.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        self._prev = getattr(_state, "branches", None)
        _state.branches = self.records
        return self

    def __exit__(self, *exc):
        _state.branches = self._prev
        return False

    def same_path(self, other: "BranchRecorder") -> bool:
        return len(self.records) == len(other.records) and all(
            np.array_equal(a, b) for a, b in zip(self.records, other.records))


def _branch(pattern):
    rec = getattr(_state, "branches", None)
    if rec is not None:
        rec.append(np.asarray(pattern).copy())


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, inputs, backward) -> Tensor:
    req = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if req:
        tape = _tape()
        if tape is not None:
            tape.nodes.append((out, inputs, backward))
    return out


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after NumPy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise arithmetic ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    """Batched ``a @ b`` for operands with at least two dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul batch dims {a.shape} @ {b.shape}") from None

    def back(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif b.ndim == 2:
            # weight matrix shared over the batch: one flat GEMM instead of a batched sum
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb
    return _node(a.data @ b.data, (a, b), back)


# -- nonlinearities -----------------------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    _branch(pos)
    return _node(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _node(t, (x,), lambda g: (g * (1.0 - t * t),))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)
    return _node(p, (x,), back)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeMismatch(f"layernorm params {gamma.shape}/{beta.shape} vs features {x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gx_hat = g * gamma.data
        n = x.shape[-1]
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return gx, unbroadcast(g * xhat, gamma.shape), unbroadcast(g, beta.shape)
    return _node(out, (x, gamma, beta), back)


def smooth_l1(x, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style penalty: ``0.5 x^2 / beta`` inside ``|x| < beta``, ``|x| - beta/2`` outside."""
    x = as_tensor(x)
    ax = np.abs(x.data)
    inside = ax < beta
    _branch(inside)
    out = np.where(inside, 0.5 * x.data * x.data / beta, ax - 0.5 * beta)
    return _node(out, (x,), lambda g: (g * np.where(inside, x.data / beta, np.sign(x.data)),))


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    keep = (x.data >= lo) & (x.data <= hi)
    _branch(np.sign(x.data - lo) + np.sign(x.data - hi))
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * keep,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def wrap_angle(x) -> Tensor:
    """Wrap into (-pi, pi]; the derivative is 1 away from the branch cut."""
    x = as_tensor(x)
    w = np.mod(x.data + np.pi, 2 * np.pi) - np.pi
    w = np.where(w <= -np.pi, np.pi, w)
    _branch(np.rint((x.data - w) / (2 * np.pi)))
    return _node(w, (x,), lambda g: (g,))


# -- shape manipulation --------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {shape}") from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, key) -> Tensor:
    x = as_tensor(x)

    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)

    def back(g):
        full = np.zeros_like(x.data)
        if basic:
            full[key] = g  # basic indexing never aliases two outputs to one input
        else:
            np.add.at(full, key, g)
        return (full,)
    return _node(x.data[key], (x,), back)


def concat(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat shapes " + ", ".join(str(t.shape) for t in xs)) from None
    cuts = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))
    return _node(out, tuple(xs), back)


def gather(x, index, axis: int) -> Tensor:
    """``np.take_along_axis``; repeated indices accumulate in the backward pass."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != x.ndim:
        raise ShapeMismatch(f"gather index rank {index.ndim} vs tensor rank {x.ndim}")
    out = np.take_along_axis(x.data, index, axis=axis)

    def back(g):
        full = np.zeros_like(x.data)
        ax = axis % x.ndim
        grids = list(np.indices(index.shape, sparse=True))
        grids[ax] = index
        np.add.at(full, tuple(np.broadcast_arrays(*grids)), g)
        return (full,)
    return _node(out, (x,), back)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _node(out, (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- composite helpers ---------------------------------------------------------------------

def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def attention(q, k, v, n_heads: int = 1) -> Tensor:
    """Scaled dot-product attention over ``(B, N, C)`` inputs, split into ``n_heads``."""
    B, Nq, C = q.shape
    Nk = k.shape[1]
    if C % n_heads:
        raise ShapeMismatch(f"width {C} not divisible into {n_heads} heads")
    d = C // n_heads

    def heads(t, n):
        return transpose(reshape(t, (B, n, n_heads, d)), (0, 2, 1, 3))
    qh, kh, vh = heads(q, Nq), heads(k, Nk), heads(v, Nk)
    scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
    out = matmul(softmax(scores, axis=-1), vh)
    return reshape(transpose(out, (0, 2, 1, 3)), (B, Nq, C))
