"""Exact expectations by enumerating every path, and Monte Carlo estimators to check against them.

For one example and a fixed model, the loss and FLOPs fraction of every
(keep bits, strategy) path are tabulated once. Exact values are then sums over
the table weighted by the policy's path probabilities, and exact gradients come
from differentiating those sums through the policy. The Monte Carlo side uses
the same score-function estimator, with the greedy path as the baseline, that
training uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decisions import CapacityError, J, enumerate_arrays, sample_batch
from .flops import path_stats
from .model import ModelConfig, TransformerModel, batch_nll, encode_first, forward_batch
from .policy import PolicyNetwork, log_prob_tensor, pool_hidden, score_function_grad
from .tasks import TaskSpec, collate, generate_example
from .tensor import Tensor

MAX_ORACLE_D = 10
DEFAULT_SAMPLE_SIZES = (10_000, 50_000, 200_000)


@dataclass
class PathTable:
    """Loss and fraction of every path for one example, in enumeration order."""

    keep: np.ndarray  # [N, D]
    strategy: np.ndarray  # [N]
    loss: np.ndarray  # [N]
    fraction: np.ndarray  # [N]
    x: np.ndarray  # [1, e] policy input

    def index_of(self, keep: np.ndarray, strategy: np.ndarray) -> np.ndarray:
        D = self.keep.shape[1]
        code = (np.asarray(keep, dtype=np.int64) << np.arange(D - 1, -1, -1)).sum(axis=-1)
        return code * J + np.asarray(strategy)


def path_table(model: TransformerModel, src, tgt) -> PathTable:
    cfg = model.config
    if cfg.D > MAX_ORACLE_D:
        raise CapacityError(f"oracle: D={cfg.D} exceeds the enumeration limit of {MAX_ORACLE_D}")
    keep, strategy = enumerate_arrays(cfg.D)
    N = len(strategy)
    single = collate([list(src)], [list(tgt)])
    batch = collate([list(src)] * N, [list(tgt)] * N)
    with T.no_grad():
        first = encode_first(model, single.src, single.src_len)
        x = pool_hidden(first.data, single.src_len).x
        first_all = Tensor(np.repeat(first.data, N, axis=0))
        logits = forward_batch(model, batch, keep, strategy, first_all)
        _, loss = batch_nll(logits, batch)
    n_src, n_tgt = len(src), len(tgt) + 1
    frac = np.array([path_stats(k, a, n_src, n_tgt, cfg)[0] for k, a in zip(keep, strategy)])
    return PathTable(keep, strategy, loss, frac, x)


def path_probabilities(policy: PolicyNetwork, table: PathTable) -> np.ndarray:
    with T.no_grad():
        g, h = policy.forward(table.x)
        lp = log_prob_tensor(g, h, table.keep, table.strategy)
    return np.exp(lp.data)


def exact_expectation(policy: PolicyNetwork, table: PathTable, values: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """``sum_paths p(path) * value`` and its gradient for every policy parameter."""
    params = policy.parameters()
    saved = [p.grad for p in params]
    policy.zero_grad()
    with T.Tape() as tape:
        g, h = policy.forward(table.x)
        lp = log_prob_tensor(g, h, table.keep, table.strategy)
        total = T.sum(T.mul(T.exp(lp), np.asarray(values, dtype=np.float64)))
    tape.backward(total)
    grads = [p.grad.copy() for p in params]
    for p, old in zip(params, saved):
        p.grad = old
    return float(total.data), grads


def _flat(grads) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads])


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return float(a @ b / (na * nb)) if na > 0 and nb > 0 else 0.0


@dataclass
class MonteCarloEstimate:
    samples: int
    reward_mean: float
    reward_se: float
    fraction_mean: float
    fraction_se: float
    grad_quality: np.ndarray
    grad_comp: np.ndarray


def monte_carlo(
    policy: PolicyNetwork, table: PathTable, n: int, rng: np.random.Generator, lam: float, chunk: int = 20_000
) -> MonteCarloEstimate:
    """Sample ``n`` paths; greedy-baseline score-function gradients of E[loss] and E[fraction]."""
    with T.no_grad():
        g, h = policy.forward(table.x)
    g, h = g.data, h.data
    greedy = table.index_of(g >= 0.5, np.argmax(h, axis=-1))[0]
    lg, fg = table.loss[greedy], table.fraction[greedy]
    gq = gc = None
    rewards, fracs = [], []
    done = 0
    while done < n:
        m = min(chunk, n - done)
        keep, strat = sample_batch(np.repeat(g, m, axis=0), np.repeat(h, m, axis=0), rng)
        idx = table.index_of(keep, strat)
        loss, frac = table.loss[idx], table.fraction[idx]
        xs = np.repeat(table.x, m, axis=0)
        q = _flat(score_function_grad(policy, xs, keep, strat, loss - lg, accumulate=False)) * m
        c = _flat(score_function_grad(policy, xs, keep, strat, frac - fg, accumulate=False)) * m
        gq = q if gq is None else gq + q
        gc = c if gc is None else gc + c
        rewards.append(-loss + lam * (1.0 - frac))
        fracs.append(frac)
        done += m
    r, f = np.concatenate(rewards), np.concatenate(fracs)
    return MonteCarloEstimate(
        samples=n,
        reward_mean=float(r.mean()),
        reward_se=float(r.std(ddof=1) / np.sqrt(n)),
        fraction_mean=float(f.mean()),
        fraction_se=float(f.std(ddof=1) / np.sqrt(n)),
        grad_quality=gq / n,
        grad_comp=gc / n,
    )


def tiny_setup(
    seed: int = 0, lam: float = 0.5, model_config: ModelConfig | None = None, task: TaskSpec | None = None
) -> tuple[TransformerModel, PolicyNetwork, list[int], list[int]]:
    """Random tiny model, a policy with non-degenerate random heads, and one copy example."""
    cfg = model_config or ModelConfig(vocab_size=16, e=16, d_ff=64, L_enc=2, L_dec=2, n_heads=2, max_len=16)
    if cfg.D > MAX_ORACLE_D:
        raise CapacityError(f"oracle: D={cfg.D} exceeds the enumeration limit of {MAX_ORACLE_D}")
    task = task or TaskSpec(kind="copy", n_min=6, n_max=8, vocab_size=cfg.vocab_size, seed=seed)
    model = TransformerModel(cfg, np.random.default_rng([seed, 1]))
    policy = PolicyNetwork(cfg.e, cfg.D, np.random.default_rng([seed, 2]), zero_heads=False)
    src, tgt = generate_example(task, np.random.default_rng([seed, 4]))
    return model, policy, src, tgt


def run_oracle(
    model: TransformerModel,
    policy: PolicyNetwork,
    src,
    tgt,
    lam: float = 0.5,
    sample_sizes=DEFAULT_SAMPLE_SIZES,
    seed: int = 0,
) -> dict:
    """Exact vs Monte Carlo agreement report (plain JSON-able dict)."""
    table = path_table(model, src, tgt)
    p = path_probabilities(policy, table)
    eq, gq = exact_expectation(policy, table, table.loss)
    ef, gc = exact_expectation(policy, table, table.fraction)
    gq, gc = _flat(gq), _flat(gc)
    er = -eq + lam * (1.0 - ef)
    g_reward = -gq - lam * gc
    rng = np.random.default_rng([seed, 5])
    rows = []
    for n in sample_sizes:
        mc = monte_carlo(policy, table, int(n), rng, lam)
        mr = -mc.grad_quality - lam * mc.grad_comp
        rows.append(
            {
                "samples": mc.samples,
                "reward_mean": mc.reward_mean,
                "reward_se": mc.reward_se,
                "reward_z": (mc.reward_mean - er) / mc.reward_se if mc.reward_se > 0 else 0.0,
                "fraction_mean": mc.fraction_mean,
                "fraction_z": (mc.fraction_mean - ef) / mc.fraction_se if mc.fraction_se > 0 else 0.0,
                "cos_quality": cosine(mc.grad_quality, gq),
                "cos_comp": cosine(mc.grad_comp, gc),
                "cos_reward": cosine(mr, g_reward),
            }
        )
    return {
        "paths": int(len(p)),
        "probability_mass": float(p.sum()),
        "lambda": lam,
        "exact": {
            "reward": er,
            "loss": eq,
            "fraction": ef,
            "grad_quality_norm": float(np.linalg.norm(gq)),
            "grad_comp_norm": float(np.linalg.norm(gc)),
        },
        "monte_carlo": rows,
    }
