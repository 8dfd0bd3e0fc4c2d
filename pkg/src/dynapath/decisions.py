"""The discrete decision space: sublayer keep bits plus one token strategy.

Keep-bit layout for a model with ``L_enc`` encoder and ``L_dec`` decoder
layers (encoder layer 1 always runs and has no bits)::

    [enc-att 2..L_enc | enc-ffn 2..L_enc | dec-att 1..L_dec | dec-ffn 1..L_dec]

so ``D = 2 * (L_enc - 1) + 2 * L_dec``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

PROB_EPS = 1e-6
MAX_ENUMERATE_D = 20


class CapacityError(ValueError):
    """Raised when an exhaustive enumeration would be too large."""


@dataclass(frozen=True)
class TokenStrategy:
    kind: str  # "keep-all" | "drop-last" | "drop-uniform"
    p: int = 0

    @property
    def label(self) -> str:
        return "keep-all" if self.kind == "keep-all" else f"{self.kind}-{self.p}"


STRATEGIES: tuple[TokenStrategy, ...] = (
    TokenStrategy("keep-all"),
    TokenStrategy("drop-last", 10),
    TokenStrategy("drop-last", 20),
    TokenStrategy("drop-last", 30),
    TokenStrategy("drop-uniform", 25),
    TokenStrategy("drop-uniform", 33),
    TokenStrategy("drop-uniform", 50),
)
J = len(STRATEGIES)


def apply_token_strategy(n: int, strategy: TokenStrategy | int) -> list[int]:
    """Indices of the tokens that survive ``strategy`` on a length-``n`` input."""
    if n < 1:
        raise ValueError("apply_token_strategy: n must be >= 1")
    if isinstance(strategy, (int, np.integer)):
        strategy = STRATEGIES[int(strategy)]
    if strategy.kind == "keep-all":
        kept = list(range(n))
    elif strategy.kind == "drop-last":
        kept = list(range(n - (strategy.p * n) // 100))
    elif strategy.kind == "drop-uniform":
        k = round(100 / strategy.p)
        kept = [i for i in range(n) if i % k != k - 1]
    else:
        raise ValueError(f"unknown token strategy {strategy.kind!r}")
    return kept or [0]


def num_keep_bits(L_enc: int, L_dec: int) -> int:
    return 2 * (L_enc - 1) + 2 * L_dec


def unit_index(L_enc: int, L_dec: int, part: str, kind: str, layer: int) -> int:
    """Position of a sublayer's keep bit. ``layer`` is 1-based."""
    if part == "enc":
        if not 2 <= layer <= L_enc:
            raise ValueError(f"encoder layer {layer} has no keep bit")
        base = 0 if kind == "att" else L_enc - 1
        return base + layer - 2
    if not 1 <= layer <= L_dec:
        raise ValueError(f"decoder layer {layer} out of range")
    base = 2 * (L_enc - 1) + (0 if kind == "att" else L_dec)
    return base + layer - 1


def unit_names(L_enc: int, L_dec: int) -> list[str]:
    names = [f"enc{l}.att" for l in range(2, L_enc + 1)]
    names += [f"enc{l}.ffn" for l in range(2, L_enc + 1)]
    names += [f"dec{l}.att" for l in range(1, L_dec + 1)]
    names += [f"dec{l}.ffn" for l in range(1, L_dec + 1)]
    return names


@dataclass(frozen=True)
class Decisions:
    """One inference path: keep bits and a token-strategy index."""

    keep: tuple[bool, ...]
    strategy: int = 0

    def __post_init__(self):
        object.__setattr__(self, "keep", tuple(bool(b) for b in self.keep))
        if not 0 <= self.strategy < J:
            raise ValueError(f"token strategy {self.strategy} outside [0, {J})")

    @property
    def D(self) -> int:
        return len(self.keep)

    @classmethod
    def all_keep(cls, D: int) -> "Decisions":
        return cls((True,) * D, 0)

    def to_text(self) -> str:
        return "".join("1" if b else "0" for b in self.keep) + f"|{self.strategy}"

    @classmethod
    def from_text(cls, text: str, D: int | None = None) -> "Decisions":
        """Parse ``"110101|3"``; errors name the offending character position."""
        bits, sep, strat = text.strip().partition("|")
        if not sep:
            raise ValueError(f"decisions {text!r}: missing '|' separator at position {len(bits)}")
        for i, ch in enumerate(bits):
            if ch not in "01":
                raise ValueError(f"decisions {text!r}: invalid bit {ch!r} at position {i}")
        if not strat.isdigit():
            raise ValueError(f"decisions {text!r}: invalid strategy index at position {len(bits) + 1}")
        if D is not None and len(bits) != D:
            raise ValueError(f"decisions {text!r}: expected {D} bits, got {len(bits)}")
        return cls(tuple(ch == "1" for ch in bits), int(strat))

    def __str__(self) -> str:
        return self.to_text()


@dataclass
class DecisionDistribution:
    """Per-bit keep probabilities ``g`` and strategy probabilities ``h``."""

    g: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=np.float64)
        self.h = np.asarray(self.h, dtype=np.float64)

    @property
    def D(self) -> int:
        return self.g.shape[-1]

    @classmethod
    def uniform(cls, D: int) -> "DecisionDistribution":
        return cls(np.full(D, 0.5), np.full(J, 1.0 / J))


def sample_decisions(dist: DecisionDistribution, rng: np.random.Generator) -> Decisions:
    g = np.clip(dist.g, PROB_EPS, 1.0 - PROB_EPS)
    keep = rng.random(g.shape[-1]) < g
    a = int(rng.choice(len(dist.h), p=dist.h / dist.h.sum()))
    return Decisions(tuple(keep), a)


def sample_batch(g: np.ndarray, h: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized sampling for ``g[B, D]``, ``h[B, J]``; returns (keep[B, D], strategy[B])."""
    g = np.clip(g, PROB_EPS, 1.0 - PROB_EPS)
    keep = rng.random(g.shape) < g
    cdf = np.cumsum(h, axis=-1)
    u = rng.random(h.shape[0]) * cdf[:, -1]
    strategy = np.minimum((cdf <= u[:, None]).sum(axis=-1), h.shape[-1] - 1)
    return keep, strategy


def argmax_decisions(dist: DecisionDistribution) -> Decisions:
    """Most likely path; keep on ties at 0.5, lowest strategy index on ties."""
    return Decisions(tuple(dist.g >= 0.5), int(np.argmax(dist.h)))


def log_prob(dist: DecisionDistribution, decisions: Decisions) -> float:
    g = np.clip(dist.g, PROB_EPS, 1.0 - PROB_EPS)
    s = np.asarray(decisions.keep, dtype=np.float64)
    if s.shape != g.shape:
        raise ValueError(f"log_prob: {s.size} keep bits vs distribution of size {g.size}")
    h = np.clip(dist.h[decisions.strategy], PROB_EPS, 1.0)
    return float(np.sum(s * np.log(g) + (1.0 - s) * np.log(1.0 - g)) + math.log(h))


def enumerate_decisions(D: int, num_strategies: int = J) -> Iterator[Decisions]:
    """Every (keep bits, strategy) pair once, bits-major in binary counting order."""
    if D > MAX_ENUMERATE_D:
        raise CapacityError(f"enumerate_decisions: D={D} exceeds the limit of {MAX_ENUMERATE_D}")
    for bits in itertools.product((False, True), repeat=D):
        for a in range(num_strategies):
            yield Decisions(bits, a)


def enumerate_arrays(D: int, num_strategies: int = J) -> tuple[np.ndarray, np.ndarray]:
    """Same order as :func:`enumerate_decisions`, as (keep[N, D], strategy[N])."""
    if D > MAX_ENUMERATE_D:
        raise CapacityError(f"enumerate_arrays: D={D} exceeds the limit of {MAX_ENUMERATE_D}")
    codes = np.arange(2**D)
    bits = ((codes[:, None] >> np.arange(D - 1, -1, -1)) & 1).astype(bool)
    keep = np.repeat(bits, num_strategies, axis=0)
    strategy = np.tile(np.arange(num_strategies), 2**D)
    return keep, strategy


# --------------------------------------------------------------------------
# Restricted decision spaces
# --------------------------------------------------------------------------

DECISION_SPACES = ("full", "encoder_only", "decoder_only", "token_only", "none")


@dataclass(frozen=True)
class DecisionSpace:
    """Which parts of a decision are free; the rest are forced to keep / keep-all."""

    free_bits: tuple[bool, ...]
    token_free: bool
    name: str = "full"

    @classmethod
    def build(cls, name: str, L_enc: int, L_dec: int) -> "DecisionSpace":
        if name not in DECISION_SPACES:
            raise ValueError(f"decision_space must be one of {DECISION_SPACES}, got {name!r}")
        n_enc = 2 * (L_enc - 1)
        D = num_keep_bits(L_enc, L_dec)
        enc = [i < n_enc for i in range(D)]
        if name == "full":
            bits, tok = [True] * D, True
        elif name == "encoder_only":
            bits, tok = enc, False
        elif name == "decoder_only":
            bits, tok = [not b for b in enc], False
        elif name == "token_only":
            bits, tok = [False] * D, True
        else:
            bits, tok = [False] * D, False
        return cls(tuple(bits), tok, name)

    @property
    def D(self) -> int:
        return len(self.free_bits)

    @property
    def is_empty(self) -> bool:
        return not (self.token_free or any(self.free_bits))

    def force(self, keep: np.ndarray, strategy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        keep = np.where(np.asarray(self.free_bits), keep, True)
        strategy = strategy if self.token_free else np.zeros_like(strategy)
        return keep, strategy
