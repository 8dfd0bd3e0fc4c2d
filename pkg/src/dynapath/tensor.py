"""Float64 tensors with a tape-based reverse-mode autodiff.

Only the operations the transformer and the policy MLP need are provided.
Every op records itself on the active :class:`Tape` when at least one input
tracks gradients, so the tape is a topologically ordered list of nodes and
``Tape.backward`` walks it once in reverse.

A module-level multiply-accumulate counter (see :func:`count_macs`) is bumped
by :func:`matmul`; the FLOPs tests use it as an instrumentation oracle.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "BackwardError",
    "InvalidBatchError",
    "Tensor",
    "Tape",
    "no_grad",
    "count_macs",
    "MacCounter",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "sigmoid",
    "log",
    "exp",
    "clip",
    "softmax",
    "layer_norm",
    "reshape",
    "transpose",
    "index",
    "scatter",
    "sum",
    "mean",
    "token_nll",
    "cross_entropy",
    "init_uniform",
    "adam_step",
    "Adam",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class BackwardError(RuntimeError):
    """Raised on misuse of the tape (double backward, foreign loss, ...)."""


class InvalidBatchError(ValueError):
    """Raised when a loss has no unmasked position to average over."""


class Tensor:
    """A float64 array plus gradient bookkeeping.

    Leaf tensors created with ``requires_grad=True`` are parameters: their
    ``grad`` buffer is allocated eagerly (zeros) and backward accumulates into
    it. Tensors produced by ops on the tape track gradients too but keep them
    in the tape's private buffers.
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple, backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_TAPES: list["Tape"] = []
_GRAD_ENABLED = [True]


class Tape:
    """Ordered record of executed ops; use as a context manager.

    >>> with Tape() as tape:
    ...     loss = sum(x * x)
    >>> tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._outputs: set[int] = set()
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        self.nodes.append(_Node(out, inputs, backward))
        self._outputs.add(id(out))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise BackwardError("tape already consumed by a previous backward(); record a new tape")
        if loss.size != 1:
            raise BackwardError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._outputs:
            raise BackwardError("loss was not produced on this tape")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if t.is_leaf:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += gi
                else:
                    key = id(t)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
        self.nodes = []


def backward(tape: Tape, loss: Tensor) -> None:
    """Functional alias for ``tape.backward(loss)``."""
    tape.backward(loss)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording for the enclosed block."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    out.is_leaf = True
    out.requires_grad = False
    if _TAPES and _GRAD_ENABLED[-1] and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        _TAPES[-1]._record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# Instrumentation
# --------------------------------------------------------------------------


class MacCounter:
    def __init__(self):
        self.macs = 0

    @property
    def flops(self) -> int:
        return 2 * self.macs


_COUNTERS: list[MacCounter] = []


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count multiply-accumulates performed by :func:`matmul` inside the block."""
    counter = MacCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


# --------------------------------------------------------------------------
# Ops
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either 2-D (shared weight) or
    has the same leading axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    if b.ndim == 2 and a.ndim > 2:
        lead = A.shape[:-1]
        out = (A.reshape(-1, A.shape[-1]) @ B).reshape(lead + (B.shape[-1],))
    else:
        out = A @ B
    if _COUNTERS:
        macs = out.size * A.shape[-1]
        for c in _COUNTERS:
            c.macs += macs

    def bw(g):
        if b.ndim == 2 and a.ndim > 2:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ B.T).reshape(A.shape) if a.requires_grad else None
            gb = A.reshape(-1, A.shape[-1]).T @ g2 if b.requires_grad else None
        else:
            ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(A, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if bias is None else add(y, bias)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * B, A.shape) if a.requires_grad else None
        gb = _unbroadcast(g * A, B.shape) if b.requires_grad else None
        return ga, gb

    return _make(A * B, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split on sign so exp never overflows
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def log(x: Tensor) -> Tensor:
    X = x.data
    return _make(np.log(X), (x,), lambda g: (g / X,))


def exp(x: Tensor) -> Tensor:
    E = np.exp(x.data)
    return _make(E, (x,), lambda g: (g * E,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    X = x.data
    inside = (X >= lo) & (X <= hi)
    return _make(np.clip(X, lo, hi), (x,), lambda g: (g * inside,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    X = x.data
    z = np.exp(X - X.max(axis=axis, keepdims=True))
    s = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    X = x.data
    e = X.shape[-1]
    if gain.shape != (e,) or bias.shape != (e,):
        raise DimensionError(f"layer_norm: last dim {e} vs gain {gain.shape}, bias {bias.shape}")
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data
    out = xhat * G + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * G
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        return gx, gg, gb

    return _make(out, (x, gain, bias), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def index(x: Tensor, key) -> Tensor:
    """Fancy indexing ``x[key]``; backward scatter-adds (duplicates accumulate)."""
    X = x.data

    def bw(g):
        gx = np.zeros_like(X)
        np.add.at(gx, key, g)
        return (gx,)

    return _make(X[key], (x,), bw)


def scatter(x: Tensor, key, shape: Sequence[int]) -> Tensor:
    """Place ``x`` at ``out[key]`` inside zeros of ``shape`` (key must not repeat)."""
    out = np.zeros(tuple(shape))
    out[key] = x.data
    return _make(out, (x,), lambda g: (g[key],))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    X = x.data

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, X.shape).copy(),)

    return _make(np.asarray(X.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def token_nll(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-position negative log-likelihood for ``logits[..., V]``."""
    Z = logits.data
    targets = np.asarray(targets)
    if Z.shape[:-1] != targets.shape:
        raise DimensionError(f"token_nll: logits {Z.shape} vs targets {targets.shape}")
    V = Z.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ValueError(f"targets must lie in [0, {V})")
    m = Z.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(Z - m).sum(axis=-1))
    picked = np.take_along_axis(Z, targets[..., None], axis=-1)[..., 0]
    out = lse - picked

    def bw(g):
        p = np.exp(Z - lse[..., None])
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return (p * g[..., None],)

    return _make(out, (logits,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean NLL over unmasked positions of ``logits[n, V]``."""
    targets = np.asarray(targets)
    w = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise InvalidBatchError("cross_entropy: every position is masked")
    return sum(mul(token_nll(logits, targets), w / total))


# --------------------------------------------------------------------------
# Initialization and optimization
# --------------------------------------------------------------------------


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, name: str | None = None) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    m: Sequence[np.ndarray],
    v: Sequence[np.ndarray],
    t: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on ``params``, ``m`` and ``v``."""
    if t < 1:
        raise ValueError("adam_step: t must be >= 1")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, mi, vi in zip(params, grads, m, v, strict=True):
        if not (p.shape == g.shape == mi.shape == vi.shape):
            raise DimensionError(f"adam_step: shapes {p.shape}, {g.shape}, {mi.shape}, {vi.shape}")
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * (g * g)
        p -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


class Adam:
    """Adam state for a fixed list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        """Apply one update using ``grads`` (defaults to each parameter's ``.grad``)."""
        if grads is None:
            grads = [p.grad for p in self.params]
        self.t += 1
        adam_step([p.data for p in self.params], grads, self.m, self.v, self.t, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
