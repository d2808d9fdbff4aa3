import json
import math

import numpy as np
import pytest
from scipy import integrate

from betatneh.estimation import (
    Dataset,
    FitResult,
    check_identifiability,
    default_bounds,
    delta_method_ci,
    fisher_info,
    fit,
    initial_value_sweep,
    loglik,
    loglik_gradient,
    select_by_aic,
)
from betatneh.model_core import ModelSpec, ParamVector, cure_fraction
from betatneh.simulation import SIM_SPEC, setting, simulate_dataset
from betatneh.special_fn import beta_fn

INTERCEPT = ModelSpec()


@pytest.fixture(scope="module")
def sim_data():
    return simulate_dataset(setting(1, n=1000, seed=3))


@pytest.fixture(scope="module")
def sim_fit(sim_data):
    return fit(sim_data, SIM_SPEC)


def one(t, d, rate=0.0):
    return Dataset.from_arrays([t], [d], [60.0], pop=[rate])


def test_loglik_censored_plateau_is_log_cure():
    th = ParamVector([2.0], 3.0, [4.0])
    ll = loglik(th, one(10.0, 0), INTERCEPT)
    assert ll == pytest.approx(math.log(cure_fraction([1.0], th)), rel=1e-13)
    assert ll == pytest.approx(-4.0 * beta_fn(2.0, 3.0), rel=1e-13)


def test_loglik_single_death():
    th = ParamVector([2.0], 2.0, [1.0])
    ll = loglik(th, one(0.5, 1, rate=0.1), INTERCEPT)
    assert ll == pytest.approx(math.log(0.35) - 1 / 12, abs=1e-13)
    lam_cum, _ = integrate.quad(lambda x: x * (1 - x), 0, 0.5, epsabs=1e-15)
    assert ll == pytest.approx(math.log(0.1 + 0.25) - lam_cum, abs=1e-12)
    assert ll == pytest.approx(-1.1331555, abs=1e-7)
    two = Dataset.from_arrays([0.5, 0.5], [1, 1], [60, 60], pop=[0.1, 0.1])
    assert loglik(th, two, INTERCEPT) == pytest.approx(2 * ll, rel=1e-14)


def test_loglik_infeasible_is_minus_inf():
    assert loglik([-1.0, 2.0, 1.0], one(0.5, 1, 0.1), INTERCEPT) == -math.inf
    assert loglik([1.0, 2.0, -1.0], one(0.5, 1, 0.1), INTERCEPT) == -math.inf


def test_death_with_no_hazard_is_minus_inf():
    # death after tau with a zero background rate has probability zero
    assert loglik([2.0, 2.0, 1.0], one(3.0, 1, 0.0), INTERCEPT) == -math.inf


def test_gradient_matches_finite_differences(sim_data):
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = np.array([rng.uniform(1.5, 3), rng.uniform(-0.3, 0.1), rng.uniform(2, 8),
                      rng.uniform(4, 12), rng.uniform(-0.5, 1.0)])
        g = loglik_gradient(x, sim_data, SIM_SPEC)
        fd = np.empty(5)
        for j in range(5):
            h = 1e-6 * max(abs(x[j]), 1.0)
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            fd[j] = (loglik(xp, sim_data, SIM_SPEC) - loglik(xm, sim_data, SIM_SPEC)) / (2 * h)
        assert np.allclose(g, fd, rtol=1e-5, atol=1e-4 * sim_data.n * 1e-3)


def test_fisher_info_edge_cases(sim_data, sim_fit):
    th = ParamVector([2.0], 3.0, [5.0])
    censored = Dataset.from_arrays([1.0, 2.0, 3.0], [0, 0, 0], [50, 60, 70], pop=[0.01] * 3)
    assert np.all(fisher_info(th, censored, INTERCEPT) == 0.0)
    single = Dataset.from_arrays([1.0, 2.0, 3.0], [0, 1, 0], [50, 60, 70], pop=[0.01] * 3)
    info = fisher_info(th, single, INTERCEPT)
    assert np.linalg.matrix_rank(info) == 1
    full = fisher_info(sim_fit.theta_hat, sim_data, SIM_SPEC)
    assert np.allclose(full, full.T)
    assert np.linalg.eigvalsh(full).min() >= -1e-12


def test_fit_recovers_truth(sim_fit):
    truth = setting(1).true_theta.to_array()
    assert sim_fit.converged
    assert not sim_fit.boundary_flagged
    z = np.abs(sim_fit.estimates - truth) / sim_fit.se
    assert np.all(z < 4), z
    assert sim_fit.n == 1000 and sim_fit.n_events == int(simulate_dataset(setting(1, n=1000, seed=3)).status.sum())


def test_fit_is_deterministic(sim_data, sim_fit):
    again = fit(sim_data, SIM_SPEC)
    assert np.array_equal(again.estimates, sim_fit.estimates)
    assert again.loglik == sim_fit.loglik


def test_aic_identity(sim_fit):
    assert sim_fit.aic == pytest.approx(-2 * sim_fit.loglik + 2 * 5, rel=1e-15)


def test_select_by_aic(sim_data, sim_fit):
    small = fit(sim_data, ModelSpec(alpha_design=(), tau_design=("age_std",)))
    assert small.k == 4
    idx = select_by_aic([small, sim_fit])
    assert idx == int(np.argmin([small.aic, sim_fit.aic]))


def test_pop_cum_hazard_term_does_not_move_argmax(sim_data, sim_fit):
    # the population cumulative hazard is parameter-free: adding it shifts
    # the log-likelihood by a constant, so the maximizer is unchanged
    rng = np.random.default_rng(4)
    const = float(np.sum(rng.uniform(0, 1, sim_data.n)))
    x = sim_fit.estimates
    for _ in range(10):
        y = x + rng.normal(0, 0.05, x.size)
        d1 = loglik(y, sim_data, SIM_SPEC) - loglik(x, sim_data, SIM_SPEC)
        d2 = (loglik(y, sim_data, SIM_SPEC) - const) - (loglik(x, sim_data, SIM_SPEC) - const)
        assert d1 == pytest.approx(d2, abs=1e-8)
        assert d1 <= 1e-9


def test_zero_deaths_does_not_crash():
    data = Dataset.from_arrays(np.linspace(1, 10, 30), np.zeros(30, int), np.full(30, 60.0), pop=np.full(30, 0.01))
    res = fit(data, INTERCEPT)
    assert np.all(np.isfinite(res.estimates))
    assert not np.all(np.isfinite(res.se))
    assert any("singular" in w for w in res.warnings)


def test_small_sample_robustness():
    data = simulate_dataset(setting(1, n=50, seed=8))
    res = fit(data, SIM_SPEC)
    assert np.all(np.isfinite(res.estimates))


def test_fit_rejects_bad_init(sim_data):
    with pytest.raises(ValueError):
        fit(sim_data, SIM_SPEC, init=[1.0, 0.0, 2.0])
    with pytest.raises(ValueError):
        fit(sim_data, SIM_SPEC, init=[-5.0, 0.0, 2.0, 5.0, 0.0])
    with pytest.raises(ValueError):
        fit(sim_data.subset(np.array([], dtype=int)), SIM_SPEC)


def test_delta_method(sim_fit):
    zero = FitResult.from_dict({**sim_fit.to_dict(), "covariance": [0.0] * 25})
    ci = delta_method_ci(zero, "cure_fraction", {"age_std": 0.0})
    assert ci.se == 0.0 and ci.lower == ci.upper == ci.estimate
    tneh = delta_method_ci(sim_fit, "tneh", {"age_std": 0.0})
    assert tneh.estimate == pytest.approx(sim_fit.estimates[3])
    assert tneh.se == pytest.approx(math.sqrt(sim_fit.covariance[3, 3]), rel=1e-12)
    cf = delta_method_ci(sim_fit, "cure_fraction", {"age_std": 0.5})
    assert 0 <= cf.lower <= cf.estimate <= cf.upper <= 1
    assert cf.estimate == pytest.approx(cure_fraction(np.array([1.0, 0.5]), sim_fit.theta_hat), rel=1e-12)
    ns = delta_method_ci(sim_fit, "net_survival", {"age_std": 0.5}, t=100.0)
    assert ns.estimate == pytest.approx(cf.estimate, rel=1e-12)
    assert ns.se == pytest.approx(cf.se, rel=1e-4)
    s = str(cf)
    assert s == f"{cf.estimate:.2f} [{cf.lower:.2f}, {cf.upper:.2f}]"
    with pytest.raises(ValueError):
        delta_method_ci(sim_fit, "net_survival", {"age_std": 0.0})
    with pytest.raises(ValueError):
        delta_method_ci(sim_fit, "median", {"age_std": 0.0})


def test_identifiability_checks():
    n = 20
    x = np.linspace(-1, 1, n)
    base = dict(time=np.ones(n), status=np.ones(n, int), age=np.full(n, 60.0), pop=np.full(n, 0.01))
    ok = check_identifiability(SIM_SPEC, Dataset.from_arrays(covariates={"age_std": x}, **base))
    assert ok.ok and ok.alpha_rank == 2 and ok.tau_rank == 2
    const = check_identifiability(SIM_SPEC, Dataset.from_arrays(covariates={"age_std": np.full(n, 0.3)}, **base))
    assert not const.ok and const.alpha_rank == 1
    spec = ModelSpec(alpha_design=("a", "b"))
    dup = check_identifiability(spec, Dataset.from_arrays(covariates={"a": x, "b": 2 * x}, **base))
    assert not dup.ok and "alpha design" in dup.details[0]


def test_rank_deficient_fit_warns():
    n = 200
    data = simulate_dataset(setting(1, n=n, seed=2))
    data.covariates["age_std"] = np.full(n, 0.5)
    res = fit(data, SIM_SPEC)
    assert any("rank deficient" in w for w in res.warnings)


def test_sweep_identical_seeds_zero_range(sim_data):
    rep = initial_value_sweep(sim_data, SIM_SPEC, K=2, seed=[5, 5])
    assert np.all(rep.ranges == 0.0)
    assert rep.max_loglik_gap == 0.0
    with pytest.raises(ValueError):
        initial_value_sweep(sim_data, SIM_SPEC, K=1, seed=0)


def test_sweep_random_inits_agree(sim_data, sim_fit):
    rep = initial_value_sweep(sim_data, SIM_SPEC, K=3, seed=1)
    assert rep.failures == []
    assert rep.max_loglik_gap < 1e-4
    assert np.all(rep.ranges <= 1e-2 * np.maximum(np.abs(sim_fit.estimates), 1))
    d = rep.to_dict()
    assert d["K"] == 3 and set(d["ranges"]) == set(SIM_SPEC.param_names)


def test_boundary_detection_and_expansion(sim_data):
    spec = ModelSpec(alpha_design=("age_std",), tau_design=("age_std",), max_expansions=0)
    b = default_bounds(spec, sim_data)
    b[3] = (0.1, 2.0)
    capped = fit(sim_data, spec, bounds=b)
    assert capped.boundary_hits["eta0"] == "upper"
    assert capped.expansions_performed == 0
    assert any("eta0" in w and "upper bound" in w for w in capped.warnings)
    free = fit(sim_data, SIM_SPEC, bounds=list(b))
    assert free.expansions_performed >= 1
    assert free.boundary_hits["eta0"] is None
    assert free.bounds[3][1] > 2.0


def test_tau_cap_stops_expansion(sim_data):
    spec = ModelSpec(alpha_design=("age_std",), tau_design=("age_std",), tau_upper_cap=2.0)
    res = fit(sim_data, spec)
    assert res.boundary_hits["eta0"] == "upper"
    assert res.bounds[3][1] == 2.0


def test_fit_result_json_roundtrip(sim_fit):
    d = json.loads(sim_fit.to_json())
    back = FitResult.from_dict(d)
    assert back.theta_hat == sim_fit.theta_hat
    assert np.allclose(back.covariance, sim_fit.covariance, rtol=1e-15)
    assert back.loglik == sim_fit.loglik
    assert back.spec.alpha_design == ("age_std",)
    with pytest.raises(ValueError):
        FitResult.from_dict({**d, "schema_version": 99})
