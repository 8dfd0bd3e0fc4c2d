import numpy as np
import pytest

from dynapath.decisions import Decisions, enumerate_decisions
from dynapath.flops import (
    attention_flops,
    ffn_flops,
    keep_prob_for_fraction,
    measured_flops,
    output_flops,
    path_flops,
    random_policy_fraction,
)
from dynapath.model import ModelConfig, TransformerModel

TINY = ModelConfig(vocab_size=16, e=16, d_ff=64, L_enc=2, L_dec=2, n_heads=2, max_len=16)


def test_unit_formulas():
    assert attention_flops(3, 5, 4) == 4 * 3 * 16 + 4 * 5 * 16 + 4 * 3 * 5 * 4
    assert ffn_flops(3, 4, 8) == 4 * 3 * 4 * 8
    assert output_flops(2, 4, 10) == 2 * 2 * 4 * 10


def test_all_keep_fraction_is_one():
    rep = path_flops(Decisions.all_keep(TINY.D), 8, 8, TINY)
    assert rep.fraction == 1.0
    assert rep.skip_stats == {"att": 0.0, "ffn": 0.0, "token": 0.0}
    assert rep.total == sum(rep.per_unit.values())


def test_skip_everything_leaves_layer_one_and_output():
    rep = path_flops(Decisions((False,) * TINY.D, 0), 8, 5, TINY)
    assert rep.total == attention_flops(8, 8, 16) + ffn_flops(8, 16, 64) + output_flops(5, 16, 16)
    # three of four attention units skipped (enc1 always runs), likewise FFN
    assert rep.skip_stats["att"] == 75.0
    assert rep.skip_stats["ffn"] == 75.0


def test_token_strategy_shrinks_later_layers():
    a = path_flops(Decisions.all_keep(TINY.D), 10, 4, TINY)
    b = path_flops(Decisions((True,) * TINY.D, 6), 10, 4, TINY)
    assert b.per_unit["enc1.att"] == a.per_unit["enc1.att"]
    assert b.per_unit["enc2.ffn"] == ffn_flops(5, 16, 64)
    assert b.skip_stats["token"] == 50.0


def test_fractions_are_valid_and_monotone_in_keep_bits():
    vals = {}
    for d in enumerate_decisions(TINY.D):
        f = path_flops(d, 9, 6, TINY).fraction
        assert 0 < f <= 1
        vals[d] = f
    for d, f in vals.items():
        for i, bit in enumerate(d.keep):
            if not bit:
                more = Decisions(d.keep[:i] + (True,) + d.keep[i + 1 :], d.strategy)
                assert vals[more] > f


def test_instrumented_count_matches_analytic_for_every_path():
    model = TransformerModel(TINY, np.random.default_rng(0))
    for n_src, n_tgt in [(8, 8), (5, 3)]:
        for d in enumerate_decisions(TINY.D):
            assert measured_flops(model, d, n_src, n_tgt) == path_flops(d, n_src, n_tgt, TINY).total


def test_random_policy_fraction_matches_enumeration():
    shapes = [(8, 5), (12, 5)]
    p = 0.3
    expect = 0.0
    for d in enumerate_decisions(TINY.D):
        k = sum(d.keep)
        w = p**k * (1 - p) ** (TINY.D - k) / 7
        expect += w * np.mean([path_flops(d, n, m, TINY).fraction for n, m in shapes])
    assert random_policy_fraction(p, shapes, TINY) == pytest.approx(expect, rel=1e-12)
    target = random_policy_fraction(0.42, shapes, TINY)
    assert keep_prob_for_fraction(target, shapes, TINY) == pytest.approx(0.42)


def test_errors():
    with pytest.raises(ValueError):
        path_flops(Decisions.all_keep(TINY.D), 0, 3, TINY)
    with pytest.raises(ValueError):
        path_flops(Decisions.all_keep(4), 3, 3, TINY)
