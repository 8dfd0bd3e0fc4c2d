import numpy as np
import pytest

from dynapath import tensor as T
from dynapath.decisions import J, CapacityError, Decisions
from dynapath.flops import path_fraction
from dynapath.model import ModelConfig, seq_loss
from dynapath.oracle import (
    cosine,
    exact_expectation,
    monte_carlo,
    path_probabilities,
    path_table,
    run_oracle,
    tiny_setup,
)


@pytest.fixture(scope="module")
def setup():
    model, policy, src, tgt = tiny_setup(seed=3)
    return model, policy, src, tgt, path_table(model, src, tgt)


def test_table_rows_match_single_path_forward(setup):
    model, _, src, tgt, table = setup
    assert len(table.loss) == 2**model.config.D * J
    for i in [0, 1, 77, 200, 447]:
        d = Decisions(tuple(bool(b) for b in table.keep[i]), int(table.strategy[i]))
        with T.no_grad():
            ref = float(seq_loss(model, src, tgt, d).data)
        assert table.loss[i] == pytest.approx(ref, rel=1e-10)
        assert table.fraction[i] == pytest.approx(path_fraction(table.keep[i], d.strategy, len(src), len(tgt) + 1, model.config))
        assert table.index_of(table.keep[i : i + 1], table.strategy[i : i + 1])[0] == i


def test_probabilities_sum_to_one(setup):
    _, policy, _, _, table = setup
    p = path_probabilities(policy, table)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(p > 0)


def test_exact_gradient_matches_finite_difference(setup):
    _, policy, _, _, table = setup
    _, grads = exact_expectation(policy, table, table.loss)
    rng = np.random.default_rng(0)
    for pi, param in enumerate(policy.parameters()):
        idx = tuple(rng.integers(0, s) for s in param.data.shape)
        old = param.data[idx]
        vals = []
        for h in (1e-6, -1e-6):
            param.data[idx] = old + h
            vals.append(float(np.dot(path_probabilities(policy, table), table.loss)))
        param.data[idx] = old
        num = (vals[0] - vals[1]) / 2e-6
        assert grads[pi][idx] == pytest.approx(num, rel=1e-5, abs=1e-9)


def test_saturated_policy_collapses_to_one_path(setup):
    model, _, src, tgt, table = setup
    _, policy, _, _ = tiny_setup(seed=3)
    policy.params["w_g"].data[:] = 0
    policy.params["b_g"].data[:] = np.where(np.arange(model.config.D) % 2 == 0, 60.0, -60.0)
    policy.params["w_s"].data[:] = 0
    policy.params["b_s"].data[:] = 0
    policy.params["b_s"].data[5] = 60.0
    keep = (np.arange(model.config.D) % 2 == 0)[None]
    i = table.index_of(keep, np.array([5]))[0]
    value, _ = exact_expectation(policy, table, table.loss)
    # probabilities are clamped away from 0 and 1, so the other 447 paths keep a sliver of mass
    assert value == pytest.approx(table.loss[i], rel=1e-4)
    mc = monte_carlo(policy, table, 500, np.random.default_rng(1), lam=0.5)
    assert mc.fraction_mean == pytest.approx(table.fraction[i])
    assert np.allclose(mc.grad_quality, 0) and np.allclose(mc.grad_comp, 0)


def test_uniform_policy_expectation_is_plain_mean(setup):
    model, _, _, _, table = setup
    _, policy, _, _ = tiny_setup(seed=3)
    for k in ("w_g", "b_g", "w_s", "b_s"):
        policy.params[k].data[:] = 0
    value, _ = exact_expectation(policy, table, table.fraction)
    assert value == pytest.approx(table.fraction.mean(), rel=1e-12)


def test_monte_carlo_agrees_with_exact(setup):
    _, policy, _, _, table = setup
    exact, grads = exact_expectation(policy, table, table.loss)
    g = np.concatenate([x.ravel() for x in grads])
    mc = monte_carlo(policy, table, 20_000, np.random.default_rng(2), lam=0.5)
    loss_mean = -(mc.reward_mean - 0.5 * (1 - mc.fraction_mean))
    assert abs(loss_mean - exact) < 5 * mc.reward_se + 5 * mc.fraction_se
    assert cosine(mc.grad_quality, g) > 0.9


def test_capacity_limit():
    big = ModelConfig(vocab_size=16, e=8, d_ff=16, L_enc=3, L_dec=4, n_heads=2, max_len=12)
    assert big.D > 10
    with pytest.raises(CapacityError, match="limit"):
        tiny_setup(model_config=big)


def test_report_structure():
    model, policy, src, tgt = tiny_setup(seed=1)
    rep = run_oracle(model, policy, src, tgt, sample_sizes=(2000, 4000))
    assert rep["paths"] == 448
    assert rep["probability_mass"] == pytest.approx(1.0)
    assert [r["samples"] for r in rep["monte_carlo"]] == [2000, 4000]
    keys = {"reward_mean", "reward_se", "reward_z", "fraction_z", "cos_quality", "cos_comp", "cos_reward"}
    assert all(keys <= set(r) for r in rep["monte_carlo"])
    assert rep == run_oracle(model, policy, src, tgt, sample_sizes=(2000, 4000))
