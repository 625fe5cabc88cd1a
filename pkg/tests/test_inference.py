import json
import math

import numpy as np
import pytest

from nonlocal_growth.data import Dataset
from nonlocal_growth.inference import (
    PARAM_NAMES,
    Chain,
    PriorSpec,
    accept_probability,
    autocorrelation,
    diagnostics,
    effective_sample_size,
    log_likelihood,
    log_prior,
    map_estimate,
    metropolis,
    posterior_predictive,
    propose,
    read_chain_csv,
    run_chain,
    write_chain_csv,
    write_diagnostics_json,
    write_predictive_csv,
)
from nonlocal_growth.model import DiscretizationConfig, ModelParams
from nonlocal_growth.solver import forward_radii
from oracles import gaussian_log_likelihood, normal_log_density

PRIOR = PriorSpec.from_medians(1.04, 0.06, 1.0, 0.403)
CFG = DiscretizationConfig(n_particles=60, r_max=2.0)
THETA = ModelParams.from_natural(0.5, 0.05, 0.05, 0.4)


def stub_chain(thetas, lps=None, accepted=None):
    thetas = np.asarray(thetas, float)
    n = thetas.shape[0]
    lps = np.zeros(n) if lps is None else np.asarray(lps, float)
    accepted = np.ones(n, bool) if accepted is None else np.asarray(accepted, bool)
    return Chain(thetas, lps, accepted)


# ---- prior --------------------------------------------------------------------------------


def test_prior_at_locations():
    want = sum(-0.5 * math.log(2 * math.pi * s * s) for s in PRIOR.scale)
    assert log_prior(np.array(PRIOR.location), PRIOR) == pytest.approx(want, rel=1e-14)
    assert PRIOR.scale == (1.0, 1.0, 5.0, 1.0)
    assert PRIOR.location[0] == pytest.approx(math.log(1.04))


def test_prior_matches_quadrature_oracle():
    rng = np.random.default_rng(5)
    for _ in range(10):
        x = rng.normal(size=4) * 2
        assert log_prior(x, PRIOR) == pytest.approx(normal_log_density(x, PRIOR.location, PRIOR.scale), abs=1e-10)
    assert log_prior(THETA, PRIOR) == log_prior(THETA.as_array(), PRIOR)


def test_prior_validation():
    with pytest.raises(ValueError):
        PriorSpec((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        PriorSpec((0.0,) * 4, (1.0, 0.0, 1.0, 1.0))


# ---- likelihood ---------------------------------------------------------------------------


def test_likelihood_zero_residuals():
    t = np.array([1.0, 2.0, 3.0])
    r = forward_radii(THETA, CFG, t)
    ds = Dataset("x", t, r)
    want = 3 * -math.log(math.sqrt(2 * math.pi) * 0.05)
    assert log_likelihood(THETA, ds, CFG) == pytest.approx(want, rel=1e-13)


def test_likelihood_single_residual_of_one_sigma():
    t = np.array([2.0])
    r = forward_radii(THETA, CFG, t)
    ds = Dataset("x", t, r * math.exp(0.05))
    want = -math.log(math.sqrt(2 * math.pi) * 0.05) - 0.5
    assert log_likelihood(THETA, ds, CFG) == pytest.approx(want, rel=1e-12)


def test_likelihood_matches_oracle_and_decreases_with_residual():
    rng = np.random.default_rng(2)
    t = np.arange(1.0, 6.0)
    model = forward_radii(THETA, CFG, t)
    obs = model * np.exp(rng.normal(0, 0.05, t.size))
    ll = log_likelihood(THETA, Dataset("x", t, obs), CFG)
    assert ll == pytest.approx(gaussian_log_likelihood(obs, model, 0.05), abs=1e-10)
    worse = obs.copy()
    worse[2] *= math.exp(0.1 * np.sign(math.log(obs[2] / model[2])))
    assert log_likelihood(THETA, Dataset("x", t, worse), CFG) < ll


def test_likelihood_failure_is_minus_inf():
    ds = Dataset("x", [1.0], [0.5])
    too_big = ModelParams.from_natural(0.5, 0.05, 0.05, 5.0)  # initial colony larger than r_max
    assert log_likelihood(too_big, ds, CFG) == -math.inf
    with pytest.raises(ValueError):
        log_likelihood(THETA, Dataset("x", [], []), CFG)


# ---- proposal and acceptance --------------------------------------------------------------


def test_proposal_limit_and_covariance():
    rng = np.random.default_rng(0)
    x = np.array([0.1, -0.2, 0.3, 0.0])
    np.testing.assert_array_equal(propose(x, 0.0, rng), x)
    draws = np.array([propose(x, 0.3, rng) for _ in range(20000)]) - x
    np.testing.assert_allclose(np.cov(draws.T), 0.09 * np.eye(4), atol=0.006)
    assert isinstance(propose(THETA, 0.1, rng), ModelParams)


def test_accept_probability_examples():
    assert accept_probability(-3.0, -3.0) == 1.0
    assert accept_probability(-3.0, -3.0 - math.log(2)) == pytest.approx(0.5, rel=1e-15)
    assert accept_probability(-3.0, -math.inf) == 0.0
    assert accept_probability(-3.0, 0.0) == 1.0


# ---- sampler ------------------------------------------------------------------------------


def std_normal(x):
    return -0.5 * float(x @ x)


def test_metropolis_rejections_repeat_state():
    ch = metropolis(std_normal, np.zeros(4), 3000, 500, np.random.default_rng(1))
    same = np.all(ch.thetas[1:] == ch.thetas[:-1], axis=1)
    np.testing.assert_array_equal(same, ~ch.accepted[1:])
    assert len(ch) == 2500
    assert ch.step_sizes.size == 500


def test_metropolis_invariant_to_constant_offset():
    a = metropolis(std_normal, np.zeros(4), 2000, 500, np.random.default_rng(3))
    b = metropolis(lambda x: std_normal(x) + 123.0, np.zeros(4), 2000, 500, np.random.default_rng(3))
    np.testing.assert_array_equal(a.thetas, b.thetas)
    np.testing.assert_array_equal(a.accepted, b.accepted)


def test_metropolis_step_frozen_after_burn_in_and_adapts():
    ch = metropolis(std_normal, np.zeros(4), 20000, 10000, np.random.default_rng(4), step_size=0.01)
    assert 0.18 <= ch.acceptance_rate <= 0.28
    assert ch.final_step_size > 0.5


def test_metropolis_validation():
    with pytest.raises(ValueError):
        metropolis(std_normal, np.zeros(4), 10, 10, np.random.default_rng())
    with pytest.raises(ValueError):
        metropolis(lambda x: -math.inf, np.zeros(4), 10, 1, np.random.default_rng())


def test_run_chain_reproducible_and_prior_start():
    kw = dict(iterations=600, burn_in=100, seed=9, log_likelihood_fn=lambda th: 0.0)
    a = run_chain(None, PRIOR, CFG, **kw)
    b = run_chain(None, PRIOR, CFG, **kw)
    np.testing.assert_array_equal(a.thetas, b.thetas)
    np.testing.assert_array_equal(a.log_posterior, b.log_posterior)
    assert a.seed == 9


def test_run_chain_with_data_short():
    t = np.arange(1.0, 6.0)
    ds = Dataset("x", t, forward_radii(THETA, CFG, t))
    ch = run_chain(ds, PRIOR, CFG, iterations=60, burn_in=20, seed=0)
    assert len(ch) == 40
    assert np.all(np.isfinite(ch.log_posterior))


# ---- MAP, diagnostics, predictive ---------------------------------------------------------


def test_map_estimate():
    ch = stub_chain([[0.1, 0.2, 0.3, 0.4]])
    assert map_estimate(ch) == ModelParams(0.1, 0.2, 0.3, 0.4)
    th = np.arange(12.0).reshape(3, 4) / 10
    assert map_estimate(stub_chain(th, [1.0, 2.0, 3.0])) == ModelParams.from_array(th[2])
    assert map_estimate(stub_chain(th, [5.0, 5.0, 1.0])) == ModelParams.from_array(th[0])
    with pytest.raises(ValueError):
        map_estimate(stub_chain(np.empty((0, 4))))


def test_autocorrelation_against_direct_sum():
    rng = np.random.default_rng(8)
    x = rng.normal(size=300).cumsum()
    d = x - x.mean()
    direct = np.array([np.dot(d[: x.size - k], d[k:]) for k in range(20)]) / np.dot(d, d)
    np.testing.assert_allclose(autocorrelation(x)[:20], direct, atol=1e-12)


def test_diagnostics_white_noise():
    rng = np.random.default_rng(12)
    n = 4000
    th = rng.normal(size=(n, 4))
    d = diagnostics(stub_chain(th, accepted=rng.random(n) < 0.3), max_lag=20)
    for name in PARAM_NAMES:
        assert d.autocorrelation[name][0] == 1.0
        assert abs(d.autocorrelation[name][1]) < 3 / math.sqrt(n)
        assert d.effective_sample_size[name] > 0.7 * n
    assert d.acceptance_rate == pytest.approx(0.3, abs=0.03)
    assert not d.low_ess


def test_ess_ar1_matches_theory():
    rng = np.random.default_rng(6)
    phi, n = 0.9, 200_000
    e = rng.normal(size=n)
    x = np.empty(n)
    x[0] = e[0]
    for i in range(1, n):
        x[i] = phi * x[i - 1] + e[i]
    assert effective_sample_size(x) == pytest.approx(n * (1 - phi) / (1 + phi), rel=0.1)


def test_diagnostics_constant_chain():
    th = np.tile([0.1, 0.2, 0.3, 0.4], (50, 1))
    d = diagnostics(stub_chain(th, accepted=np.zeros(50)), max_lag=10)
    assert d.acceptance_rate == 0.0
    assert all(d.degenerate.values())
    assert d.low_ess
    json.dumps(d.to_dict())
    with pytest.raises(ValueError):
        diagnostics(stub_chain(th[:5]), max_lag=10)


def test_predictive_single_sample_collapses():
    ch = stub_chain([THETA.as_array()])
    t = np.array([1.0, 2.0, 4.0])
    pred = posterior_predictive(ch, Dataset("x", t, [0.5, 0.5, 0.5]), CFG, None, 5, np.random.default_rng(0))
    curve = forward_radii(THETA, CFG, t)
    np.testing.assert_array_equal(pred.low, curve)
    np.testing.assert_array_equal(pred.high, curve)
    assert pred.n_failed == 0


def test_predictive_band_ordered_and_skips_failures():
    rng = np.random.default_rng(1)
    th = THETA.as_array() + rng.normal(0, 0.05, (20, 4))
    th[0, 3] = math.log(5.0)  # initial colony does not fit inside r_max
    ch = stub_chain(th)
    t = np.linspace(0.0, 5.0, 6)
    pred = posterior_predictive(ch, None, CFG, None, 200, np.random.default_rng(2), times=t)
    assert np.all(pred.low <= pred.median) and np.all(pred.median <= pred.high)
    assert pred.n_failed > 0


def test_chain_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    ch = stub_chain(rng.normal(size=(10, 4)), rng.normal(size=10), rng.random(10) < 0.5)
    ch.burn_in = 5
    p = write_chain_csv(ch, tmp_path / "c.csv")
    back = read_chain_csv(p)
    np.testing.assert_array_equal(back.thetas, ch.thetas)
    np.testing.assert_array_equal(back.log_posterior, ch.log_posterior)
    np.testing.assert_array_equal(back.accepted, ch.accepted)
    assert p.read_text().splitlines()[1].startswith("6,")
    d = diagnostics(back, 3)
    doc = json.loads(write_diagnostics_json(d, tmp_path / "d.json", {"x": 1}).read_text())
    assert doc["x"] == 1 and doc["n_samples"] == 10
    pred = posterior_predictive(stub_chain([THETA.as_array()]), None, CFG, None, 1, rng, times=[1.0])
    assert write_predictive_csv(pred, tmp_path / "p.csv").read_text().startswith(
        "time_day,radius_lo_mm,radius_med_mm,radius_hi_mm")
