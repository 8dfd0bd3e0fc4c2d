"""Finite-difference checks of the autodiff ops, the model and the policy.

Each case draws random inputs from a seeded generator and reduces the op's
output to a scalar with random weights; the tape gradient is compared with a
central difference. Relative error is ``max|analytic - numeric|`` over the
checked coordinates divided by ``max(max|analytic|, max|numeric|, floor)``.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .decisions import J
from .model import ModelConfig, TransformerModel, batch_nll, forward_batch
from .policy import PolicyNetwork, log_prob_tensor
from .tasks import collate
from .tensor import Tensor

EPS = 1e-6
FLOOR = 1e-6

# A case returns (leaves, scalar_fn, coords): scalar_fn() must build its result
# from the leaves' current data; coords is None (check every element) or a
# list of (leaf_index, flat_index) pairs.
Case = Callable[[np.random.Generator], tuple[list[Tensor], Callable[[], Tensor], list | None]]


def _leaf(a) -> Tensor:
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def _weighted(rng, out: Tensor, w=None) -> Tensor:
    w = rng.standard_normal(out.shape) if w is None else w
    return T.sum(T.mul(out, w))


def _away_from(x: np.ndarray, points, gap: float = 1e-2) -> np.ndarray:
    for p in points:
        close = np.abs(x - p) < gap
        x = np.where(close, p + np.sign(x - p + 1e-12) * gap * 2, x)
    return x


def _unary(op, make=lambda rng, s: rng.standard_normal(s)):
    def case(rng):
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
        x = _leaf(make(rng, shape))
        w = rng.standard_normal(shape)
        return [x], lambda: _weighted(rng, op(x), w), None

    return case


def _broadcast_binary(op):
    def case(rng):
        shape = tuple(int(s) for s in rng.integers(1, 5, size=3))
        other = tuple(1 if rng.random() < 0.4 else s for s in shape[1:])
        a, b = _leaf(rng.standard_normal(shape)), _leaf(rng.standard_normal(other))
        w = rng.standard_normal(shape)
        return [a, b], lambda: _weighted(rng, op(a, b), w), None

    return case


def _matmul(rng):
    b_, n, k, m = (int(v) for v in rng.integers(1, 5, size=4))
    a = _leaf(rng.standard_normal((b_, n, k)))
    b = _leaf(rng.standard_normal((k, m)) if rng.random() < 0.5 else rng.standard_normal((b_, k, m)))
    w = rng.standard_normal((b_, n, m))
    return [a, b], lambda: _weighted(rng, T.matmul(a, b), w), None


def _linear(rng):
    n, k, m = (int(v) for v in rng.integers(1, 6, size=3))
    x, W, bias = _leaf(rng.standard_normal((n, k))), _leaf(rng.standard_normal((k, m))), _leaf(rng.standard_normal(m))
    w = rng.standard_normal((n, m))
    return [x, W, bias], lambda: _weighted(rng, T.linear(x, W, bias), w), None


def _softmax(rng):
    shape = tuple(int(v) for v in rng.integers(1, 5, size=2)) + (int(rng.integers(2, 6)),)
    axis = int(rng.integers(0, 3)) - 3
    x = _leaf(rng.standard_normal(shape) * 2)
    w = rng.standard_normal(shape)
    return [x], lambda: _weighted(rng, T.softmax(x, axis=axis), w), None


def _layer_norm(rng):
    n, e = int(rng.integers(1, 5)), int(rng.integers(2, 7))
    x, g, b = _leaf(rng.standard_normal((n, e))), _leaf(1 + 0.1 * rng.standard_normal(e)), _leaf(rng.standard_normal(e))
    w = rng.standard_normal((n, e))
    return [x, g, b], lambda: _weighted(rng, T.layer_norm(x, g, b), w), None


def _shape_ops(rng):
    a, b, c = (int(v) for v in rng.integers(1, 5, size=3))
    x = _leaf(rng.standard_normal((a, b, c)))
    perm = tuple(rng.permutation(3))
    w = rng.standard_normal((c * b, a))

    def f():
        y = T.transpose(x, perm)
        y = T.reshape(y, (-1,))
        return _weighted(rng, T.reshape(y, (c * b, a)), w)

    return [x], f, None


def _index_scatter(rng):
    n, e = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    x = _leaf(rng.standard_normal((n, e)))
    rows = rng.integers(0, n, size=int(rng.integers(1, 2 * n)))  # repeats accumulate
    perm = rng.permutation(n + 2)[:n]
    w1 = rng.standard_normal((len(rows), e))
    w2 = rng.standard_normal((n + 2, e))

    def f():
        g = _weighted(rng, T.index(x, rows), w1)
        s = _weighted(rng, T.scatter(x, perm, (n + 2, e)), w2)
        return T.add(g, s)

    return [x], f, None


def _reductions(rng):
    shape = tuple(int(v) for v in rng.integers(1, 5, size=3))
    x = _leaf(rng.standard_normal(shape))
    axis = int(rng.integers(0, 3))
    w1 = rng.standard_normal(np.sum(np.zeros(shape), axis=axis).shape)
    w2 = rng.standard_normal(np.mean(np.zeros(shape), axis=axis, keepdims=True).shape)

    def f():
        return T.add(_weighted(rng, T.sum(x, axis=axis), w1), T.add(_weighted(rng, T.mean(x, axis=axis, keepdims=True), w2), T.mean(x)))

    return [x], f, None


def _cross_entropy(rng):
    n, V = int(rng.integers(1, 6)), int(rng.integers(2, 7))
    z = _leaf(rng.standard_normal((n, V)) * 2)
    tgt = rng.integers(0, V, size=n)
    mask = rng.random(n) < 0.7
    mask[0] = True
    return [z], lambda: T.cross_entropy(z, tgt, mask), None


def _model(rng):
    cfg = ModelConfig(vocab_size=10, e=8, d_ff=16, L_enc=2, L_dec=2, n_heads=2, max_len=8)
    model = TransformerModel(cfg, rng)
    B = 3
    srcs = [list(rng.integers(3, 10, size=int(rng.integers(2, 7)))) for _ in range(B)]
    tgts = [list(rng.integers(3, 10, size=int(rng.integers(1, 5)))) for _ in range(B)]
    batch = collate(srcs, tgts)
    keep = rng.random((B, cfg.D)) < 0.6
    strat = rng.integers(0, J, size=B)
    leaves = model.parameters()
    sizes = np.array([p.size for p in leaves])
    which = rng.choice(len(leaves), size=12, p=sizes / sizes.sum())
    coords = [(int(i), int(rng.integers(0, leaves[i].size))) for i in which]

    def f():
        loss, _ = batch_nll(forward_batch(model, batch, keep, strat), batch)
        return loss

    return leaves, f, coords


def _policy(rng):
    e, D, B = 6, 6, 4
    pol = PolicyNetwork(e, D, rng, zero_heads=False)
    x = rng.standard_normal((B, e))
    keep = rng.random((B, D)) < 0.5
    strat = rng.integers(0, J, size=B)
    adv = rng.standard_normal(B)

    def f():
        g, h = pol.forward(x)
        return T.sum(T.mul(log_prob_tensor(g, h, keep, strat), adv))

    return pol.parameters(), f, None


CASES: dict[str, Case] = {
    "matmul": _matmul,
    "linear": _linear,
    "add": _broadcast_binary(T.add),
    "sub": _broadcast_binary(T.sub),
    "mul": _broadcast_binary(T.mul),
    "neg": _unary(T.neg),
    "relu": _unary(T.relu, lambda rng, s: _away_from(rng.standard_normal(s), [0.0])),
    "sigmoid": _unary(T.sigmoid, lambda rng, s: 3 * rng.standard_normal(s)),
    "log": _unary(T.log, lambda rng, s: rng.uniform(0.2, 3.0, s)),
    "exp": _unary(T.exp),
    "clip": _unary(lambda x: T.clip(x, -0.5, 0.7), lambda rng, s: _away_from(rng.standard_normal(s), [-0.5, 0.7])),
    "softmax": _softmax,
    "layer_norm": _layer_norm,
    "reshape_transpose": _shape_ops,
    "index_scatter": _index_scatter,
    "sum_mean": _reductions,
    "cross_entropy": _cross_entropy,
    "model": _model,
    "policy": _policy,
}


def check_case(case: Case, seed: int) -> float:
    """Max relative error of one seeded case."""
    rng = np.random.default_rng([seed, 0xC4EC])
    leaves, fn, coords = case(rng)
    for p in leaves:
        p.grad = None
    with T.Tape() as tape:
        out = fn()
    tape.backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in leaves]
    if coords is None:
        coords = [(i, j) for i, p in enumerate(leaves) for j in range(p.size)]
    a, n = np.empty(len(coords)), np.empty(len(coords))
    with T.no_grad():
        for c, (i, j) in enumerate(coords):
            flat = leaves[i].data.reshape(-1)
            old = flat[j]
            flat[j] = old + EPS
            up = float(fn().data)
            flat[j] = old - EPS
            down = float(fn().data)
            flat[j] = old
            n[c] = (up - down) / (2 * EPS)
            a[c] = analytic[i].reshape(-1)[j]
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), FLOOR)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def run_suite(n_seeds: int = 100, cases: dict[str, Case] | None = None) -> dict:
    """Run every case for ``n_seeds`` seeds; returns per-case max error and the runtime."""
    cases = CASES if cases is None else cases
    t0 = time.perf_counter()
    worst = {name: max(check_case(case, s) for s in range(n_seeds)) for name, case in cases.items()}
    return {"max_rel_err": worst, "overall": max(worst.values()), "seconds": time.perf_counter() - t0, "seeds": n_seeds}
