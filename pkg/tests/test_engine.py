import numpy as np
import pytest

from conftest import random_small_dataset, sim_sample, toy_config, toy_fractional
from fracimp.data import stack
from fracimp.engine import (INIT_COMPLETE_CASE, FiConfig, fit_alpha_complete_case, i_step, initial_params,
                            iterate, m_step, observed_loglik, run_em, w_step)
from fracimp.estimators import fit_full_data
from fracimp.proposal import fit_proposal
from fracimp.rng import StreamFactory
from fracimp.simulation import simulation_fi_config

FIRST_W = [0.1129, 0.2581, 0.1714, 0.2429]
FINAL_W = [0.0886, 0.2743, 0.1334, 0.3000]


def _unit_pair(fd, uid):
    """Weights of the (0, 1) draws of one unit."""
    rows = np.flatnonzero(fd.unit_id == uid)
    vals, w = fd.values[rows], fd.weights[rows]
    return w[vals == 0][0], w[vals == 1][0]


def test_toy_complete_case_alpha_and_h_values(toy):
    data, proposal, fd = toy
    alpha, sigma = fit_alpha_complete_case(data, toy_config())
    np.testing.assert_allclose(alpha, [1.386, -2.079], atol=2e-3)
    assert sigma is None
    assert sorted(set(np.round(fd.h_values[fd.imputed], 4))) == [0.2, 0.3333, 0.6667, 0.8]


def test_toy_first_weight_step_and_alpha_update(toy):
    _, _, fd = toy
    cfg = toy_config()
    p0 = initial_params(fd, cfg)
    w = w_step(fd, p0, cfg)
    got = fd.with_weights(w)
    np.testing.assert_allclose([*_unit_pair(got, 2), *_unit_pair(got, 3)], FIRST_W, atol=1e-3)
    p1 = m_step(got, cfg, p0)
    np.testing.assert_allclose(p1.alpha, [1.0860, -1.3127], atol=1e-3)


def test_toy_final_weights(toy):
    _, _, fd = toy
    res = iterate(fd, toy_config())
    assert res.converged
    got = res.fractional_data
    np.testing.assert_allclose([*_unit_pair(got, 2), *_unit_pair(got, 3)], FINAL_W, atol=0.02)
    got.check_weights()


def test_complete_case_start_reaches_a_different_point(toy):
    # with complete-case starting values the separated propensity fit pins unit 3 to one draw value
    _, _, fd = toy
    res = iterate(fd, toy_config(init=INIT_COMPLETE_CASE))
    assert min(_unit_pair(res.fractional_data, 3)) < 1e-6


def test_weights_normalised_per_unit():
    sample, _ = sim_sample(400, seed=2)
    cfg = simulation_fi_config(M=30)
    prop = fit_proposal(sample.observed, cfg.covariate_formula)
    res = run_em(sample.observed, prop, cfg, StreamFactory(2).child(1))
    res.fractional_data.check_weights(1e-12)
    assert np.all(res.fractional_data.weights[~res.fractional_data.imputed] == 1.0)


@pytest.mark.parametrize("update_alpha", [True, False])
def test_loglik_trace_monotone_on_random_datasets(update_alpha):
    rng = np.random.default_rng(123)
    for k in range(100 if update_alpha else 30):
        data = random_small_dataset(rng)
        cfg = FiConfig(M=10, tolerance=1e-8, max_iterations=60, update_alpha=update_alpha)
        res = run_em(data, fit_proposal(data, ["X1"]), cfg, StreamFactory(k))
        tr = np.asarray(res.loglik_trace)
        drops = np.diff(tr)
        assert drops.min() >= -1e-8 * max(1.0, np.abs(tr).max()), (k, drops.min())


def test_seed_determinism_bit_exact():
    sample, _ = sim_sample(300, seed=5)
    cfg = simulation_fi_config(M=20)
    prop = fit_proposal(sample.observed, cfg.covariate_formula)
    a = run_em(sample.observed, prop, cfg, StreamFactory(9))
    b = run_em(sample.observed, prop, cfg, StreamFactory(9))
    assert a.fractional_data.weights.tobytes() == b.fractional_data.weights.tobytes()
    assert a.params.vector().tobytes() == b.params.vector().tobytes()
    c = run_em(sample.observed, prop, cfg, StreamFactory(10))
    assert not np.array_equal(a.fractional_data.values, c.fractional_data.values)


def test_draws_depend_only_on_unit_id():
    sample, _ = sim_sample(200, seed=6)
    data = sample.observed
    cfg = simulation_fi_config(M=7)
    prop = fit_proposal(data, cfg.covariate_formula)
    full = i_step(data, prop, 7, StreamFactory(1))
    keep = np.arange(0, data.n, 2)
    sub = i_step(data.take(keep), prop, 7, StreamFactory(1))
    np.testing.assert_array_equal(full.take_units(keep).values, sub.values)


def test_no_missing_data_reduces_to_complete_data_fits():
    sample, _ = sim_sample(300, seed=7)
    data = sample.observed.with_covariate("X2", sample.truth)
    cfg = simulation_fi_config(M=5).resolved(data)
    res = run_em(data, fit_proposal(data, cfg.covariate_formula), cfg, StreamFactory(0))
    assert res.fractional_data.n_rows == data.n
    theta, beta = fit_full_data(data.columns(), cfg)
    np.testing.assert_allclose(res.params.theta, theta, atol=1e-8)
    np.testing.assert_allclose(res.params.beta, beta, atol=1e-10)


def test_fixed_alpha_stays_at_complete_case_fit():
    sample, _ = sim_sample(300, seed=8)
    cfg = simulation_fi_config(M=10, update_alpha=False)
    prop = fit_proposal(sample.observed, cfg.covariate_formula)
    res = run_em(sample.observed, prop, cfg, StreamFactory(0))
    alpha, sigma = fit_alpha_complete_case(sample.observed, cfg)
    np.testing.assert_array_equal(res.params.alpha, alpha)
    assert res.params.alpha_sigma == sigma


def test_loglik_trace_last_entry_is_final_params(toy):
    _, _, fd = toy
    cfg = toy_config()
    res = iterate(fd, cfg)
    assert res.loglik_trace[-1] == pytest.approx(observed_loglik(fd, res.params, cfg), rel=1e-12)
    assert len(res.loglik_trace) == res.iterations_used + 1


def test_binary_family_rejects_non_binary_outcome():
    sample, _ = sim_sample(100, seed=1)
    cfg = simulation_fi_config(M=5, outcome_family="binary")
    with pytest.raises(ValueError, match="outcome must be 0/1"):
        run_em(sample.observed, fit_proposal(sample.observed, ["X1", "X3"]), cfg, StreamFactory(0))


def test_given_draws_reproduce_stacking(toy):
    data, _, fd = toy
    again = stack(data, {2: fd.values[1:6], 3: fd.values[6:11]}, {2: fd.h_values[1:6], 3: fd.h_values[6:11]})
    np.testing.assert_array_equal(again.values, fd.values)
