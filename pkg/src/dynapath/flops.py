"""Analytic FLOPs for any inference path.

Convention: FLOPs = 2 x multiply-accumulates of every matrix product
(projections, attention scores, attention-weighted sums, FFN maps and the
output projection). Softmax, layer norm, activations, bias adds and the
embedding lookup cost nothing. This matches the MAC counter in
:mod:`dynapath.tensor` exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .decisions import J, Decisions, apply_token_strategy, unit_index
from .model import ModelConfig, forward_batch
from .tasks import collate


def attention_flops(n_q: int, n_kv: int, e: int) -> int:
    """Q/O projections on queries, K/V on keys, plus scores and weighted sum."""
    if n_q < 1 or n_kv < 1 or e < 1:
        raise ValueError("attention_flops: lengths and width must be >= 1")
    return 4 * n_q * e * e + 4 * n_kv * e * e + 4 * n_q * n_kv * e


def ffn_flops(n: int, e: int, d_ff: int) -> int:
    if n < 1 or e < 1 or d_ff < 1:
        raise ValueError("ffn_flops: all arguments must be >= 1")
    return 4 * n * e * d_ff


def output_flops(m: int, e: int, vocab_size: int) -> int:
    return 2 * m * e * vocab_size


@dataclass
class FlopsReport:
    total: int
    per_unit: dict[str, int]
    fraction: float
    skip_stats: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"total": self.total, "fraction": self.fraction, "per_unit": dict(self.per_unit), "skip_stats": dict(self.skip_stats)}


def _unit_costs(keep: tuple[bool, ...], strategy: int, n_src: int, n_tgt: int, c: ModelConfig) -> tuple[dict[str, int], int]:
    e = c.e
    n_kept = len(apply_token_strategy(n_src, strategy))
    units: dict[str, int] = {
        "enc1.att": attention_flops(n_src, n_src, e),
        "enc1.ffn": ffn_flops(n_src, e, c.d_ff),
    }
    for l in range(2, c.L_enc + 1):
        ia = unit_index(c.L_enc, c.L_dec, "enc", "att", l)
        if_ = unit_index(c.L_enc, c.L_dec, "enc", "ffn", l)
        units[f"enc{l}.att"] = attention_flops(n_kept, n_kept, e) if keep[ia] else 0
        units[f"enc{l}.ffn"] = ffn_flops(n_kept, e, c.d_ff) if keep[if_] else 0
    for l in range(1, c.L_dec + 1):
        ia = unit_index(c.L_enc, c.L_dec, "dec", "att", l)
        if_ = unit_index(c.L_enc, c.L_dec, "dec", "ffn", l)
        units[f"dec{l}.att"] = (attention_flops(n_tgt, n_tgt, e) + attention_flops(n_tgt, n_kept, e)) if keep[ia] else 0
        units[f"dec{l}.ffn"] = ffn_flops(n_tgt, e, c.d_ff) if keep[if_] else 0
    units["out_proj"] = output_flops(n_tgt, e, c.vocab_size)
    return units, n_kept


@lru_cache(maxsize=1 << 16)
def _path_cached(keep: tuple[bool, ...], strategy: int, n_src: int, n_tgt: int, c: ModelConfig) -> tuple[int, float, float, float, float]:
    units, n_kept = _unit_costs(keep, strategy, n_src, n_tgt, c)
    full, _ = _unit_costs((True,) * c.D, 0, n_src, n_tgt, c)
    total = sum(units.values())
    n_att = c.L_enc - 1 + c.L_dec
    att_kept = sum(keep[: c.L_enc - 1]) + sum(keep[2 * (c.L_enc - 1) : 2 * (c.L_enc - 1) + c.L_dec])
    ffn_kept = sum(keep[c.L_enc - 1 : 2 * (c.L_enc - 1)]) + sum(keep[2 * (c.L_enc - 1) + c.L_dec :])
    att = 100.0 * (n_att - att_kept) / (n_att + 1)
    ffn = 100.0 * (n_att - ffn_kept) / (n_att + 1)
    tok = 100.0 * (n_src - n_kept) / n_src
    return total, total / sum(full.values()), att, ffn, tok


def path_flops(decisions: Decisions, n_src: int, n_tgt: int, config: ModelConfig) -> FlopsReport:
    """Cost of one path for a source of ``n_src`` tokens and ``n_tgt`` decoder positions.

    ``skip_stats`` gives the percentage of all attention units and all FFN
    units skipped (encoder layer 1 counted as an always-kept unit) and the
    percentage of source tokens dropped.
    """
    if n_src < 1 or n_tgt < 1:
        raise ValueError("path_flops: sequence lengths must be >= 1")
    if decisions.D != config.D:
        raise ValueError(f"path_flops: decisions carry {decisions.D} bits, config needs {config.D}")
    units, _ = _unit_costs(decisions.keep, decisions.strategy, n_src, n_tgt, config)
    total, frac, att, ffn, tok = _path_cached(decisions.keep, decisions.strategy, n_src, n_tgt, config)
    return FlopsReport(total, units, frac, {"att": att, "ffn": ffn, "token": tok})


def path_fraction(keep, strategy: int, n_src: int, n_tgt: int, config: ModelConfig) -> float:
    return _path_cached(tuple(bool(b) for b in keep), int(strategy), int(n_src), int(n_tgt), config)[1]


def path_stats(keep, strategy: int, n_src: int, n_tgt: int, config: ModelConfig) -> tuple[float, float, float, float]:
    """(fraction, att %, ffn %, token %) without building a report."""
    _, frac, att, ffn, tok = _path_cached(tuple(bool(b) for b in keep), int(strategy), int(n_src), int(n_tgt), config)
    return frac, att, ffn, tok


def full_path_flops(n_src: int, n_tgt: int, config: ModelConfig) -> int:
    return _path_cached((True,) * config.D, 0, n_src, n_tgt, config)[0]


def random_policy_fraction(keep_prob: float, shapes, config: ModelConfig, strategy_probs=None) -> float:
    """Expected fraction when every bit is kept with ``keep_prob`` independently.

    ``shapes`` is a sequence of ``(n_src, n_tgt)`` pairs; the result averages
    over them. Unit costs add up given the strategy, so the expectation is
    affine in ``keep_prob``.
    """
    hp = [1.0 / J] * J if strategy_probs is None else list(strategy_probs)
    D = config.D
    lo = hi = 0.0
    shapes = list(shapes)
    for n_src, n_tgt in shapes:
        for a, w in enumerate(hp):
            lo += w * path_fraction((False,) * D, a, n_src, n_tgt, config)
            hi += w * path_fraction((True,) * D, a, n_src, n_tgt, config)
    lo, hi = lo / len(shapes), hi / len(shapes)
    return lo + keep_prob * (hi - lo)


def keep_prob_for_fraction(target: float, shapes, config: ModelConfig, strategy_probs=None) -> float:
    """Keep probability whose expected random-policy fraction equals ``target`` (clipped to [0, 1])."""
    lo = random_policy_fraction(0.0, shapes, config, strategy_probs)
    hi = random_policy_fraction(1.0, shapes, config, strategy_probs)
    if hi == lo:
        return 1.0
    return min(max((target - lo) / (hi - lo), 0.0), 1.0)


def measured_flops(model, decisions: Decisions, n_src: int, n_tgt: int) -> int:
    """FLOPs counted by the matmul instrumentation for one forward pass on a dummy example."""
    c = model.config
    src = [3 + i % (c.vocab_size - 3) for i in range(n_src)]
    tgt = [3 + i % (c.vocab_size - 3) for i in range(n_tgt - 1)]
    batch = collate([src], [tgt])
    keep = np.asarray([decisions.keep], dtype=bool)
    with T.no_grad(), T.count_macs() as counter:
        forward_batch(model, batch, keep, np.asarray([decisions.strategy]))
    return counter.flops
