import numpy as np
import pytest

from _reference import reference_logits
from dynapath import tensor as T
from dynapath.decisions import J, Decisions, enumerate_arrays
from dynapath.model import (
    BOS,
    ModelConfig,
    TransformerModel,
    batch_nll,
    decoder_forward,
    encoder_forward,
    forward_batch,
    greedy_generate,
    greedy_generate_batch,
    seq_loss,
)
from dynapath.tasks import collate

CFG = ModelConfig(vocab_size=12, e=16, d_ff=32, L_enc=3, L_dec=2, n_heads=4, max_len=16)


@pytest.fixture(scope="module")
def model():
    return TransformerModel(CFG, np.random.default_rng(7))


def _example(rng, n=None, m=None):
    n = n or int(rng.integers(1, 12))
    m = m or int(rng.integers(1, 6))
    return list(rng.integers(3, 12, size=n)), list(rng.integers(3, 12, size=m))


def test_batched_forward_matches_plain_numpy_reference(model):
    rng = np.random.default_rng(0)
    srcs, tgts = zip(*[_example(rng) for _ in range(12)])
    batch = collate(list(srcs), list(tgts))
    keep = rng.random((12, CFG.D)) < 0.5
    strat = rng.integers(0, J, size=12)
    keep[0], strat[0] = True, 0
    with T.no_grad():
        logits = forward_batch(model, batch, keep, strat).data
    for b in range(12):
        m = len(tgts[b]) + 1
        ref = reference_logits(model, srcs[b], [BOS] + list(tgts[b]), keep[b], strat[b])
        np.testing.assert_allclose(logits[b, :m], ref, rtol=1e-10, atol=1e-10)


def test_closed_gate_is_identity_exactly(model):
    """Skipping every unit leaves embeddings untouched: logits = emb @ out_proj."""
    rng = np.random.default_rng(1)
    src, tgt = _example(rng, n=6, m=3)
    batch = collate([src], [tgt])
    with T.no_grad():
        logits = forward_batch(model, batch, np.zeros((1, CFG.D), bool), np.array([0])).data[0]
    P = model.params
    dec = [BOS] + tgt
    expect = (P["tok_emb"].data[dec] + P["pos_emb"].data[np.arange(len(dec))]) @ P["out_proj"].data
    assert np.array_equal(logits, expect)


def test_mixed_gates_in_one_batch_match_per_example_runs_bit_exactly(model):
    rng = np.random.default_rng(2)
    srcs, tgts = zip(*[_example(rng, n=8, m=4) for _ in range(6)])
    batch = collate(list(srcs), list(tgts))
    keep = rng.random((6, CFG.D)) < 0.5
    strat = np.zeros(6, dtype=np.int64)
    with T.no_grad():
        joint = forward_batch(model, batch, keep, strat).data
        for b in range(6):
            alone = forward_batch(model, batch.select([b]), keep[b : b + 1], strat[b : b + 1]).data
            assert np.array_equal(joint[b], alone[0])


def test_decoder_is_causal(model):
    rng = np.random.default_rng(3)
    src, tgt = _example(rng, n=5, m=5)
    keep = Decisions.all_keep(CFG.D)
    with T.no_grad():
        mem = encoder_forward(model, src, keep)
        a = decoder_forward(model, [BOS] + tgt, mem, keep).data
        tgt2 = tgt[:2] + [(t % 9) + 3 for t in tgt[2:]]
        b = decoder_forward(model, [BOS] + tgt2, mem, keep).data
    np.testing.assert_array_equal(a[:3], b[:3])
    assert not np.allclose(a[3:], b[3:])


def test_dropped_tokens_do_not_influence_later_layers(model):
    rng = np.random.default_rng(4)
    src, tgt = _example(rng, n=10, m=3)
    d = Decisions((True,) * CFG.D, 3)  # drop-last 30%: last 3 tokens removed after layer 1
    with T.no_grad():
        mem = encoder_forward(model, src, d)
    assert mem.kept_indices == list(range(7))
    assert mem.hidden.shape == (7, CFG.e)
    assert mem.first_layer_output.shape == (10, CFG.e)


def test_padding_does_not_change_results(model):
    rng = np.random.default_rng(5)
    short, long_ = _example(rng, n=3, m=2), _example(rng, n=11, m=5)
    keep = np.ones((2, CFG.D), bool)
    with T.no_grad():
        pair = forward_batch(model, collate([short[0], long_[0]], [short[1], long_[1]]), keep, np.array([0, 0])).data
        alone = forward_batch(model, collate([short[0]], [short[1]]), keep[:1], np.array([0])).data
    np.testing.assert_allclose(pair[0, :3], alone[0], rtol=1e-12, atol=1e-12)


def test_gradients_reach_only_executed_units(model):
    rng = np.random.default_rng(6)
    src, tgt = _example(rng, n=6, m=3)
    keep = [True] * CFG.D
    keep[1] = False  # enc3.att
    d = Decisions(tuple(keep), 0)
    model.zero_grad()
    with T.Tape() as tape:
        loss = seq_loss(model, src, tgt, d)
    tape.backward(loss)
    assert np.all(model["enc3.att.wq"].grad == 0)
    assert np.any(model["enc2.att.wq"].grad != 0)
    assert np.any(model["dec1.cross.wk"].grad != 0)
    model.zero_grad()


def test_every_enumerated_path_gives_finite_loss():
    cfg = ModelConfig(vocab_size=10, e=8, d_ff=16, L_enc=2, L_dec=2, n_heads=2, max_len=8)
    m = TransformerModel(cfg, np.random.default_rng(0))
    keep, strat = enumerate_arrays(cfg.D)
    batch = collate([[3, 4, 5, 6, 7]] * len(strat), [[5, 6]] * len(strat))
    with T.no_grad():
        _, per = batch_nll(forward_batch(m, batch, keep, strat), batch)
    assert per.shape == (448,) and np.all(np.isfinite(per))


def test_greedy_generation_batch_matches_single(model):
    rng = np.random.default_rng(8)
    srcs, tgts = zip(*[_example(rng, n=6, m=3) for _ in range(4)])
    batch = collate(list(srcs), list(tgts))
    keep = rng.random((4, CFG.D)) < 0.7
    strat = rng.integers(0, J, size=4)
    outs = greedy_generate_batch(model, batch, keep, strat, max_steps=5)
    for b in range(4):
        assert outs[b] == greedy_generate(model, srcs[b], Decisions(tuple(keep[b]), int(strat[b])), max_steps=5)


def test_invalid_inputs_raise(model):
    d = Decisions.all_keep(CFG.D)
    with pytest.raises(ValueError):
        encoder_forward(model, [], d)
    with pytest.raises(ValueError):
        encoder_forward(model, [3, 4], Decisions.all_keep(CFG.D - 1))
    with pytest.raises(ValueError):
        encoder_forward(model, [3] * (CFG.max_len + 1), d)
    with pytest.raises(ValueError):
        ModelConfig(e=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(L_enc=1)
