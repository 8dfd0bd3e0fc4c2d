"""Pre-norm encoder-decoder transformer with per-example skippable sublayers.

Encoder layer 1 always runs on every token; its output feeds the policy.
A token strategy then thins the sequence, and layers 2..L_enc plus every
decoder layer may bypass their attention and FFN units. A bypassed unit
passes its residual input through unchanged (bit-exact), and its parameters
receive no gradient from that example.

Batched code works on padded arrays; examples whose gate is closed are taken
out of the batch for that sublayer, so skipped work is never executed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .decisions import J, Decisions, apply_token_strategy, num_keep_bits, unit_index
from .tensor import Tensor

PAD, BOS, EOS = 0, 1, 2
NEG_INF = -1e30


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 16
    e: int = 32
    d_ff: int = 64
    L_enc: int = 2
    L_dec: int = 2
    n_heads: int = 2
    max_len: int = 32

    def __post_init__(self):
        for name, val in asdict(self).items():
            if not isinstance(val, int) or val < 1:
                raise ValueError(f"ModelConfig.{name} must be a positive integer, got {val!r}")
        if self.e % self.n_heads:
            raise ValueError(f"ModelConfig.e={self.e} is not divisible by n_heads={self.n_heads}")
        if self.L_enc < 2:
            raise ValueError("ModelConfig.L_enc must be >= 2 (layer 1 always runs and feeds the policy)")

    @property
    def D(self) -> int:
        return num_keep_bits(self.L_enc, self.L_dec)

    @property
    def J(self) -> int:
        return J


def _ln(rng, params, prefix, e):
    params[prefix + "ln_g"] = Tensor(np.ones(e), requires_grad=True, name=prefix + "ln_g")
    params[prefix + "ln_b"] = Tensor(np.zeros(e), requires_grad=True, name=prefix + "ln_b")


def _att_params(rng, params, prefix, e, cross=False):
    _ln(rng, params, prefix, e)
    if cross:
        params[prefix + "mem_ln_g"] = Tensor(np.ones(e), requires_grad=True, name=prefix + "mem_ln_g")
        params[prefix + "mem_ln_b"] = Tensor(np.zeros(e), requires_grad=True, name=prefix + "mem_ln_b")
    for w in ("wq", "wk", "wv", "wo"):
        params[prefix + w] = T.init_uniform(rng, (e, e), e, name=prefix + w)


def _ffn_params(rng, params, prefix, e, d_ff):
    _ln(rng, params, prefix, e)
    params[prefix + "w1"] = T.init_uniform(rng, (e, d_ff), e, name=prefix + "w1")
    params[prefix + "b1"] = T.init_uniform(rng, (d_ff,), e, name=prefix + "b1")
    params[prefix + "w2"] = T.init_uniform(rng, (d_ff, e), d_ff, name=prefix + "w2")
    params[prefix + "b2"] = T.init_uniform(rng, (e,), d_ff, name=prefix + "b2")


class TransformerModel:
    """All trainable weights, keyed by dotted names in construction order."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        c = config
        p: dict[str, Tensor] = {}
        p["tok_emb"] = T.init_uniform(rng, (c.vocab_size, c.e), c.e, name="tok_emb")
        p["pos_emb"] = T.init_uniform(rng, (c.max_len, c.e), c.e, name="pos_emb")
        for l in range(1, c.L_enc + 1):
            _att_params(rng, p, f"enc{l}.att.", c.e)
            _ffn_params(rng, p, f"enc{l}.ffn.", c.e, c.d_ff)
        for l in range(1, c.L_dec + 1):
            _att_params(rng, p, f"dec{l}.self.", c.e)
            _att_params(rng, p, f"dec{l}.cross.", c.e, cross=True)
            _ffn_params(rng, p, f"dec{l}.ffn.", c.e, c.d_ff)
        p["out_proj"] = T.init_uniform(rng, (c.e, c.vocab_size), c.e, name="out_proj")
        self.params = p

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


@dataclass
class EncodedMemory:
    """Encoder output for one example."""

    hidden: Tensor  # [n_kept, e]
    kept_indices: list[int]
    first_layer_output: Tensor  # [n, e]


@dataclass
class BatchMemory:
    hidden: Tensor  # [B, K, e]
    key_mask: np.ndarray  # [B, K] True where a real kept token sits
    kept: list[list[int]]


# --------------------------------------------------------------------------
# Sublayers
# --------------------------------------------------------------------------


def _mask_add(key_mask: np.ndarray) -> np.ndarray:
    return np.where(key_mask, 0.0, NEG_INF)[:, None, None, :]


def _attention(model, prefix, xq, xkv, mask_add):
    c = model.config
    p = model.params
    B, nq, e = xq.shape
    nk = xkv.shape[1]
    h, d = c.n_heads, e // c.n_heads
    q = T.linear(xq, p[prefix + "wq"]).reshape(B, nq, h, d).transpose(0, 2, 1, 3)
    k = T.linear(xkv, p[prefix + "wk"]).reshape(B, nk, h, d).transpose(0, 2, 3, 1)
    v = T.linear(xkv, p[prefix + "wv"]).reshape(B, nk, h, d).transpose(0, 2, 1, 3)
    scores = T.add(T.mul(T.matmul(q, k), 1.0 / math.sqrt(d)), mask_add)
    w = T.softmax(scores, axis=-1)
    o = T.matmul(w, v).transpose(0, 2, 1, 3).reshape(B, nq, e)
    return T.linear(o, p[prefix + "wo"])


def _norm(model, prefix, x, which="ln"):
    return T.layer_norm(x, model.params[prefix + which + "_g"], model.params[prefix + which + "_b"])


def _self_attention(model, prefix, x, mask_add):
    xn = _norm(model, prefix, x)
    return _attention(model, prefix, xn, xn, mask_add)


def _ffn(model, prefix, x):
    p = model.params
    hdn = T.relu(T.linear(_norm(model, prefix, x), p[prefix + "w1"], p[prefix + "b1"]))
    return T.linear(hdn, p[prefix + "w2"], p[prefix + "b2"])


def _gated(h: Tensor, gate: np.ndarray | None, block) -> Tensor:
    """Run ``block(h_rows, rows)`` only for examples whose gate is open.

    ``block`` returns the full post-residual hidden state for its rows. Closed
    rows keep ``h`` as-is; the recombination multiplies by exact 0/1 masks so
    both branches are bit-exact.
    """
    if gate is None or gate.all():
        return block(h, slice(None))
    rows = np.flatnonzero(gate)
    if rows.size == 0:
        return h
    out = block(T.index(h, (rows,)), rows)
    keep_old = (~gate).astype(np.float64)[:, None, None]
    return T.add(T.mul(h, keep_old), T.scatter(out, (rows,), h.shape))


# --------------------------------------------------------------------------
# Encoder / decoder (batched)
# --------------------------------------------------------------------------


def _lengths_mask(lengths: np.ndarray, n: int) -> np.ndarray:
    return np.arange(n)[None, :] < np.asarray(lengths)[:, None]


def embed(model, tokens: np.ndarray, positions: np.ndarray | None = None) -> Tensor:
    tokens = np.asarray(tokens)
    n = tokens.shape[1]
    if n > model.config.max_len:
        raise ValueError(f"sequence length {n} exceeds max_len={model.config.max_len}")
    pos = np.arange(n) if positions is None else positions
    return T.add(T.index(model["tok_emb"], tokens), T.index(model["pos_emb"], pos))


def encode_first(model, src: np.ndarray, lengths: np.ndarray) -> Tensor:
    """Embedding plus encoder layer 1 on the full (padded) source batch."""
    src = np.asarray(src)
    if src.ndim != 2 or src.shape[1] < 1 or np.any(np.asarray(lengths) < 1):
        raise ValueError("encoder input must contain at least one token per example")
    mask_add = _mask_add(_lengths_mask(lengths, src.shape[1]))
    x = embed(model, src)
    x = T.add(x, _self_attention(model, "enc1.att.", x, mask_add))
    return T.add(x, _ffn(model, "enc1.ffn.", x))


def thin_tokens(first: Tensor, lengths: np.ndarray, strategy: np.ndarray) -> tuple[Tensor, np.ndarray, list[list[int]]]:
    kept = [apply_token_strategy(int(n), int(a)) for n, a in zip(lengths, strategy)]
    K = max(len(k) for k in kept)
    B = len(kept)
    t_idx = np.zeros((B, K), dtype=np.int64)
    key_mask = np.zeros((B, K), dtype=bool)
    for b, k in enumerate(kept):
        t_idx[b, : len(k)] = k
        key_mask[b, : len(k)] = True
    if K == first.shape[1] and key_mask.all() and all(k == list(range(K)) for k in kept):
        return first, key_mask, kept
    b_idx = np.broadcast_to(np.arange(B)[:, None], (B, K))
    return T.index(first, (b_idx, t_idx)), key_mask, kept


def encode_rest(model, first: Tensor, lengths: np.ndarray, keep: np.ndarray, strategy: np.ndarray) -> BatchMemory:
    """Token thinning and encoder layers 2..L_enc under the given decisions."""
    c = model.config
    keep = np.asarray(keep, dtype=bool)
    if keep.ndim != 2 or keep.shape[1] != c.D:
        raise ValueError(f"keep bits must have shape [B, {c.D}], got {keep.shape}")
    h, key_mask, kept = thin_tokens(first, lengths, strategy)
    for l in range(2, c.L_enc + 1):
        att = keep[:, unit_index(c.L_enc, c.L_dec, "enc", "att", l)]
        ffn = keep[:, unit_index(c.L_enc, c.L_dec, "enc", "ffn", l)]
        pa, pf = f"enc{l}.att.", f"enc{l}.ffn."

        def att_block(x, rows, pa=pa):
            return T.add(x, _self_attention(model, pa, x, _mask_add(key_mask[rows])))

        def ffn_block(x, rows, pf=pf):
            return T.add(x, _ffn(model, pf, x))

        h = _gated(h, att, att_block)
        h = _gated(h, ffn, ffn_block)
    return BatchMemory(h, key_mask, kept)


def decode(model, dec_in: np.ndarray, memory: BatchMemory, keep: np.ndarray) -> Tensor:
    """Teacher-forced decoder logits ``[B, m, V]``."""
    c = model.config
    keep = np.asarray(keep, dtype=bool)
    dec_in = np.asarray(dec_in)
    m = dec_in.shape[1]
    if m < 1:
        raise ValueError("decoder input must contain at least one token")
    causal = np.where(np.tril(np.ones((m, m), dtype=bool)), 0.0, NEG_INF)[None, None]
    mem = memory.hidden
    mem_add = _mask_add(memory.key_mask)
    h = embed(model, dec_in)
    for l in range(1, c.L_dec + 1):
        att = keep[:, unit_index(c.L_enc, c.L_dec, "dec", "att", l)]
        ffn = keep[:, unit_index(c.L_enc, c.L_dec, "dec", "ffn", l)]
        ps, pc, pf = f"dec{l}.self.", f"dec{l}.cross.", f"dec{l}.ffn."

        def att_block(x, rows, ps=ps, pc=pc):
            x = T.add(x, _self_attention(model, ps, x, causal))
            mem_rows = mem if isinstance(rows, slice) else T.index(mem, (rows,))
            memn = _norm(model, pc, mem_rows, "mem_ln")
            return T.add(x, _attention(model, pc, _norm(model, pc, x), memn, mem_add[rows]))

        def ffn_block(x, rows, pf=pf):
            return T.add(x, _ffn(model, pf, x))

        h = _gated(h, att, att_block)
        h = _gated(h, ffn, ffn_block)
    return T.linear(h, model["out_proj"])


def forward_batch(model, batch, keep, strategy, first: Tensor | None = None) -> Tensor:
    """Full teacher-forced pass for a :class:`~dynapath.tasks.Batch`."""
    if first is None:
        first = encode_first(model, batch.src, batch.src_len)
    memory = encode_rest(model, first, batch.src_len, keep, strategy)
    return decode(model, batch.dec_in, memory, keep)


def batch_nll(logits: Tensor, batch) -> tuple[Tensor, np.ndarray]:
    """Token-mean loss tensor over the batch plus per-example mean NLL (array)."""
    nll = T.token_nll(logits, batch.labels)
    w = batch.label_mask.astype(np.float64)
    per_example = (nll.data * w).sum(axis=1) / w.sum(axis=1)
    loss = T.sum(T.mul(nll, w / w.sum()))
    return loss, per_example


def token_correct(logits: Tensor, batch) -> np.ndarray:
    """Boolean [B, m] of teacher-forced argmax hits (False on padding)."""
    return (np.argmax(logits.data, axis=-1) == batch.labels) & batch.label_mask


# --------------------------------------------------------------------------
# Single-example API
# --------------------------------------------------------------------------


def _one(decisions: Decisions, D: int) -> tuple[np.ndarray, np.ndarray]:
    if decisions.D != D:
        raise ValueError(f"decisions carry {decisions.D} keep bits, model needs {D}")
    return np.asarray([decisions.keep], dtype=bool), np.asarray([decisions.strategy])


def encoder_forward(model, tokens, decisions: Decisions) -> EncodedMemory:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("encoder_forward: token sequence must be non-empty")
    keep, strat = _one(decisions, model.config.D)
    lengths = np.array([tokens.size])
    first = encode_first(model, tokens[None], lengths)
    mem = encode_rest(model, first, lengths, keep, strat)
    n, e = tokens.size, model.config.e
    return EncodedMemory(
        hidden=T.reshape(mem.hidden, (len(mem.kept[0]), e)),
        kept_indices=mem.kept[0],
        first_layer_output=T.reshape(first, (n, e)),
    )


def decoder_forward(model, target_tokens, memory: EncodedMemory, decisions: Decisions) -> Tensor:
    target_tokens = np.asarray(target_tokens, dtype=np.int64)
    if target_tokens.ndim != 1 or target_tokens.size == 0:
        raise ValueError("decoder_forward: target sequence must be non-empty")
    keep, _ = _one(decisions, model.config.D)
    k, e = len(memory.kept_indices), model.config.e
    bm = BatchMemory(T.reshape(memory.hidden, (1, k, e)), np.ones((1, k), dtype=bool), [memory.kept_indices])
    logits = decode(model, target_tokens[None], bm, keep)
    return T.reshape(logits, (target_tokens.size, model.config.vocab_size))


def seq_loss(model, src, tgt, decisions: Decisions) -> Tensor:
    """Teacher-forced cross-entropy of ``tgt`` (plus EOS) given ``src``."""
    tgt = list(tgt)
    mem = encoder_forward(model, src, decisions)
    logits = decoder_forward(model, [BOS] + tgt, mem, decisions)
    return T.cross_entropy(logits, np.asarray(tgt + [EOS]))


def greedy_generate(model, src, decisions: Decisions, max_steps: int) -> list[int]:
    """Argmax decoding until EOS (not included in the output) or ``max_steps`` tokens."""
    if max_steps < 1:
        raise ValueError("greedy_generate: max_steps must be >= 1")
    with T.no_grad():
        mem = encoder_forward(model, src, decisions)
        out: list[int] = []
        for _ in range(max_steps):
            logits = decoder_forward(model, [BOS] + out, mem, decisions)
            tok = int(np.argmax(logits.data[-1]))
            if tok == EOS:
                break
            out.append(tok)
    return out


def greedy_generate_batch(model, batch, keep, strategy, max_steps: int) -> list[list[int]]:
    """Batched argmax decoding; decoder work is redone per step (no cache)."""
    with T.no_grad():
        first = encode_first(model, batch.src, batch.src_len)
        mem = encode_rest(model, first, batch.src_len, keep, strategy)
        B = len(mem.kept)
        seqs = np.full((B, 1), BOS, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        outs: list[list[int]] = [[] for _ in range(B)]
        for _ in range(max_steps):
            logits = decode(model, seqs, mem, keep)
            nxt = np.argmax(logits.data[:, -1], axis=-1)
            for b in range(B):
                if not done[b]:
                    if nxt[b] == EOS:
                        done[b] = True
                    else:
                        outs[b].append(int(nxt[b]))
            if done.all():
                break
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return outs
