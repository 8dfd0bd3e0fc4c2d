"""Input-dependent policy: pooled first-layer output -> decision distribution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decisions import PROB_EPS, J, DecisionDistribution, Decisions, DecisionSpace
from .tensor import Tensor


@dataclass(frozen=True)
class PolicyInput:
    """Mean-pooled first encoder layer output; build it with :func:`pool_hidden`."""

    x: np.ndarray  # [e] or [B, e]


def pool_hidden(first_layer_output, lengths=None) -> PolicyInput:
    """Mean over token vectors. Accepts ``[n, e]`` or padded ``[B, n, e]`` with ``lengths``."""
    H = first_layer_output.data if isinstance(first_layer_output, Tensor) else np.asarray(first_layer_output)
    if H.ndim == 2:
        if H.shape[0] < 1:
            raise ValueError("pool_hidden: need at least one token")
        return PolicyInput(H.mean(axis=0))
    if lengths is None:
        return PolicyInput(H.mean(axis=1))
    lengths = np.asarray(lengths)
    w = (np.arange(H.shape[1])[None, :] < lengths[:, None]).astype(np.float64)
    return PolicyInput((H * w[:, :, None]).sum(axis=1) / lengths[:, None])


class PolicyNetwork:
    """LayerNorm -> Linear -> ReLU, then a sigmoid keep head and a softmax strategy head."""

    def __init__(self, e: int, D: int, rng: np.random.Generator, hidden: int | None = None, zero_heads: bool = True):
        eh = e if hidden is None else hidden
        self.e, self.D, self.hidden = e, D, eh
        p: dict[str, Tensor] = {
            "ln_g": Tensor(np.ones(e), requires_grad=True),
            "ln_b": Tensor(np.zeros(e), requires_grad=True),
            "w_h": T.init_uniform(rng, (e, eh), e),
            "b_h": T.init_uniform(rng, (eh,), e),
        }
        if zero_heads:
            p["w_g"] = Tensor(np.zeros((eh, D)), requires_grad=True)
            p["b_g"] = Tensor(np.zeros(D), requires_grad=True)
            p["w_s"] = Tensor(np.zeros((eh, J)), requires_grad=True)
            p["b_s"] = Tensor(np.zeros(J), requires_grad=True)
        else:
            p["w_g"] = T.init_uniform(rng, (eh, D), eh)
            p["b_g"] = T.init_uniform(rng, (D,), eh)
            p["w_s"] = T.init_uniform(rng, (eh, J), eh)
            p["b_s"] = T.init_uniform(rng, (J,), eh)
        for k, t in p.items():
            t.name = "policy." + k
        self.params = p

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def forward(self, x: np.ndarray) -> tuple[Tensor, Tensor]:
        """Differentiable (g[B, D], h[B, J]) for pooled inputs ``x[B, e]``."""
        p = self.params
        z = T.layer_norm(Tensor(np.atleast_2d(x)), p["ln_g"], p["ln_b"])
        hid = T.relu(T.linear(z, p["w_h"], p["b_h"]))
        g = T.sigmoid(T.linear(hid, p["w_g"], p["b_g"]))
        h = T.softmax(T.linear(hid, p["w_s"], p["b_s"]), axis=-1)
        return g, h


def policy_forward(policy: PolicyNetwork, x: PolicyInput) -> DecisionDistribution:
    if not np.all(np.isfinite(x.x)):
        raise ValueError("policy_forward: non-finite policy input")
    with T.no_grad():
        g, h = policy.forward(x.x)
    if np.ndim(x.x) == 1:
        return DecisionDistribution(g.data[0], h.data[0])
    return DecisionDistribution(g.data, h.data)


def log_prob_tensor(g: Tensor, h: Tensor, keep: np.ndarray, strategy: np.ndarray, space: DecisionSpace | None = None) -> Tensor:
    """Per-row log-probability of the sampled path, over free components only."""
    s = np.asarray(keep, dtype=np.float64)
    B = s.shape[0]
    free = np.ones(g.shape[-1]) if space is None else np.asarray(space.free_bits, dtype=np.float64)
    gc = T.clip(g, PROB_EPS, 1.0 - PROB_EPS)
    bern = T.add(T.mul(T.log(gc), s * free), T.mul(T.log(T.sub(1.0, gc)), (1.0 - s) * free))
    lp = T.sum(bern, axis=-1)
    if space is None or space.token_free:
        rows = np.arange(B) if h.shape[0] == B else np.zeros(B, dtype=np.int64)
        ha = T.clip(T.index(h, (rows, np.asarray(strategy))), PROB_EPS, 1.0)
        lp = T.add(lp, T.log(ha))
    return lp


def score_function_grad(
    policy: PolicyNetwork,
    x,
    keep: np.ndarray,
    strategy: np.ndarray,
    advantage,
    space: DecisionSpace | None = None,
    accumulate: bool = True,
) -> list[np.ndarray]:
    """``mean_b advantage_b * grad log p(path_b | x_b)`` for every policy parameter.

    Returns the gradient list (parameter order) and, with ``accumulate``,
    also adds it to each parameter's ``grad`` buffer.
    """
    xa = x.x if isinstance(x, PolicyInput) else np.asarray(x)
    xa = np.atleast_2d(xa)
    keep = np.atleast_2d(np.asarray(keep, dtype=bool))
    strategy = np.atleast_1d(np.asarray(strategy))
    adv = np.broadcast_to(np.asarray(advantage, dtype=np.float64), (keep.shape[0],))
    params = policy.parameters()
    saved = [p.grad for p in params]
    for p in params:
        p.grad = np.zeros_like(p.data)
    if np.any(adv != 0):
        with T.Tape() as tape:
            g, h = policy.forward(xa)
            lp = log_prob_tensor(g, h, keep, strategy, space)
            obj = T.sum(T.mul(lp, adv / keep.shape[0]))
        tape.backward(obj)
    grads = [p.grad for p in params]
    for p, old, gi in zip(params, saved, grads):
        base = np.zeros_like(gi) if old is None else old
        p.grad = base + gi if accumulate else base
    return [gi.copy() for gi in grads]


def decisions_from_arrays(keep: np.ndarray, strategy: np.ndarray) -> list[Decisions]:
    return [Decisions(tuple(k), int(a)) for k, a in zip(np.atleast_2d(keep), np.atleast_1d(strategy))]
