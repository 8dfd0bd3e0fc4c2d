"""Synthetic seq2seq tasks whose targets follow a known deterministic rule."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .model import BOS, EOS, PAD

TASK_KINDS = ("copy", "reverse", "prefix-extract", "parity-classify")
SPLITS = {"train": 0, "val": 1, "test": 2}
EVEN_CLASS, ODD_CLASS = 3, 4


@dataclass(frozen=True)
class Vocab:
    size: int = 16

    def __post_init__(self):
        if self.size < 8:
            raise ValueError(f"vocab size must be >= 8, got {self.size}")

    pad, bos, eos = PAD, BOS, EOS

    @property
    def first_symbol(self) -> int:
        return 3

    @property
    def num_symbols(self) -> int:
        return self.size - 3


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "copy"
    n_min: int = 4
    n_max: int = 12
    k: int = 4
    vocab_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError(f"task n_range must satisfy 1 <= min <= max, got [{self.n_min}, {self.n_max}]")
        if self.kind == "prefix-extract" and not 1 <= self.k <= self.n_min:
            raise ValueError(f"prefix-extract k={self.k} must lie in [1, n_min={self.n_min}]")
        Vocab(self.vocab_size)

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.vocab_size)

    def max_target_len(self) -> int:
        return {"copy": self.n_max, "reverse": self.n_max, "prefix-extract": self.k, "parity-classify": 1}[self.kind]


def target_for(spec: TaskSpec, src: list[int]) -> list[int]:
    """The task's rule applied to ``src``."""
    if spec.kind == "copy":
        return list(src)
    if spec.kind == "reverse":
        return list(reversed(src))
    if spec.kind == "prefix-extract":
        return list(src[: spec.k])
    parity = sum(t - 3 for t in src) % 2
    return [ODD_CLASS if parity else EVEN_CLASS]


def split_of(src: Iterable[int]) -> str:
    """Hash partition of the source space: 80% train, 10% val, 10% test."""
    bucket = zlib.crc32(np.asarray(list(src), dtype=np.int64).tobytes()) % 10
    return "train" if bucket < 8 else ("val" if bucket == 8 else "test")


def generate_example(spec: TaskSpec, rng: np.random.Generator, split: str | None = None) -> tuple[list[int], list[int]]:
    """Draw one (src, tgt) pair; with ``split`` set, reject sources from other splits."""
    vocab = spec.vocab
    while True:
        n = int(rng.integers(spec.n_min, spec.n_max + 1))
        src = [int(t) for t in rng.integers(vocab.first_symbol, vocab.size, size=n)]
        if split is None or split_of(src) == split:
            return src, target_for(spec, src)


@dataclass
class Batch:
    src: np.ndarray  # [B, n] padded with PAD
    src_len: np.ndarray  # [B]
    dec_in: np.ndarray  # [B, m] = BOS + tgt, padded
    labels: np.ndarray  # [B, m] = tgt + EOS, padded
    label_mask: np.ndarray  # [B, m]
    sources: list[list[int]] = field(default_factory=list)
    targets: list[list[int]] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.sources)

    @property
    def tgt_len(self) -> np.ndarray:
        """Decoder sequence lengths (targets plus EOS)."""
        return self.label_mask.sum(axis=1)

    def select(self, rows) -> "Batch":
        rows = np.asarray(rows)
        return collate([self.sources[r] for r in rows], [self.targets[r] for r in rows])


def collate(sources: list[list[int]], targets: list[list[int]]) -> Batch:
    B = len(sources)
    n = max(len(s) for s in sources)
    m = max(len(t) for t in targets) + 1
    src = np.full((B, n), PAD, dtype=np.int64)
    dec_in = np.full((B, m), PAD, dtype=np.int64)
    labels = np.full((B, m), PAD, dtype=np.int64)
    mask = np.zeros((B, m), dtype=bool)
    for b, (s, t) in enumerate(zip(sources, targets)):
        src[b, : len(s)] = s
        dec_in[b, : len(t) + 1] = [BOS] + list(t)
        labels[b, : len(t) + 1] = list(t) + [EOS]
        mask[b, : len(t) + 1] = True
    src_len = np.array([len(s) for s in sources], dtype=np.int64)
    return Batch(src, src_len, dec_in, labels, mask, [list(s) for s in sources], [list(t) for t in targets])


def split_rng(spec: TaskSpec, split: str) -> np.random.Generator:
    """Independent stream per (task seed, split)."""
    return np.random.default_rng([spec.seed, SPLITS[split], 0x5D])


def make_batches(
    spec: TaskSpec, batch_size: int, n_batches: int, rng: np.random.Generator | None = None, split: str = "train"
) -> Iterator[Batch]:
    if batch_size < 1 or n_batches < 1:
        raise ValueError("make_batches: batch_size and n_batches must be >= 1")
    rng = split_rng(spec, split) if rng is None else rng
    for _ in range(n_batches):
        pairs = [generate_example(spec, rng, split) for _ in range(batch_size)]
        yield collate([p[0] for p in pairs], [p[1] for p in pairs])


def fixed_set(spec: TaskSpec, split: str, size: int, batch_size: int = 64) -> list[Batch]:
    """A deterministic evaluation set of ``size`` examples."""
    rng = split_rng(spec, split)
    pairs = [generate_example(spec, rng, split) for _ in range(size)]
    return [
        collate([p[0] for p in pairs[i : i + batch_size]], [p[1] for p in pairs[i : i + batch_size]])
        for i in range(0, size, batch_size)
    ]


def write_corpus(path: str | Path, pairs: Iterable[tuple[list[int], list[int]]]) -> None:
    """One example per line: space-separated src ids, a tab, space-separated tgt ids."""
    with open(path, "w") as fh:
        for src, tgt in pairs:
            fh.write(" ".join(map(str, src)) + "\t" + " ".join(map(str, tgt)) + "\n")


def read_corpus(path: str | Path) -> list[tuple[list[int], list[int]]]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            src, _, tgt = line.partition("\t")
            out.append(([int(t) for t in src.split()], [int(t) for t in tgt.split()]))
    return out
