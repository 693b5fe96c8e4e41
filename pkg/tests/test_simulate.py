import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from recurbench.data import round_half_up
from recurbench.simulate import (
    DEFAULT_FOLLOW_UP,
    ScenarioSpec,
    apply_censoring,
    ar1_correlation,
    cumulative_hazard,
    format_spec,
    generate_scenario,
    invert_conditional_hazard,
    read_spec,
    sample_covariates,
    sample_event_times,
    sample_frailty,
    substream,
    true_beta,
)


def conditional(t_prev, w, eta, spec, z):
    return cumulative_hazard(t_prev + w, eta, spec, z) - cumulative_hazard(t_prev, eta, spec, z)


def test_inversion_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        spec = ScenarioSpec(weibull_scale=rng.uniform(0.2, 3), weibull_shape=rng.uniform(0.5, 3))
        u, t, eta, z = rng.exponential(), rng.uniform(0, 2), rng.normal(), rng.gamma(4, 0.25)
        w = invert_conditional_hazard(u, t, eta, spec, z)
        assert abs(conditional(t, w, eta, spec, z) - u) < 1e-9


def test_inversion_matches_bisection():
    rng = np.random.default_rng(1)
    spec = ScenarioSpec()
    for _ in range(200):
        u, t, eta, z = rng.exponential(), rng.uniform(0, 2), rng.normal(), rng.gamma(4, 0.25)
        w = invert_conditional_hazard(u, t, eta, spec, z)
        ref = optimize.bisect(lambda x: conditional(t, x, eta, spec, z) - u, 0.0, 100.0, xtol=1e-14)
        assert w == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_inversion_hand_value():
    # Lambda0(t) = t^2: from t=1 with u=3, (1 + 3)^(1/2) - 1 = 1
    assert invert_conditional_hazard(3.0, 1.0, 0.0, ScenarioSpec()) == pytest.approx(1.0)
    assert invert_conditional_hazard(4.0, 0.0, 0.0, ScenarioSpec()) == pytest.approx(2.0)


def test_inversion_errors():
    with pytest.raises(ValueError):
        invert_conditional_hazard(0.0, 1.0, 0.0, ScenarioSpec())
    with pytest.raises(ValueError):
        cumulative_hazard(-1.0, 0.0, ScenarioSpec())


def test_ar1_correlation_matrix():
    R = ar1_correlation(4, 0.5)
    assert R[0, 3] == pytest.approx(0.125)
    assert np.allclose(R, R.T) and np.all(np.diag(R) == 1)


def test_covariates_follow_ar1_structure():
    X = sample_covariates(20000, 5, 0.3, 0.7, np.random.default_rng(2))
    assert np.allclose(X.mean(axis=0), 0.3, atol=0.03)
    assert np.allclose(np.corrcoef(X.T), ar1_correlation(5, 0.7), atol=0.03)


def test_covariate_errors():
    with pytest.raises(ValueError):
        sample_covariates(1, 5, 0, 0.5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_covariates(10, 5, 0, 1.0, np.random.default_rng(0))


@pytest.mark.parametrize("param,var", [("variance", 0.25), ("shape", 4.0)])
def test_frailty_moments(param, var):
    spec = ScenarioSpec(frailty_variance=var, frailty_parametrization=param)
    z = sample_frailty(spec, 200000, np.random.default_rng(3))
    assert z.mean() == pytest.approx(1.0, abs=0.01)
    expected = 0.25  # both readings give Var(z) = 0.25 here
    assert z.var() == pytest.approx(expected, rel=0.03)


def test_zero_frailty_variance_means_no_frailty():
    assert np.all(sample_frailty(ScenarioSpec(frailty_variance=0), 5, np.random.default_rng(0)) == 1)


def test_event_counts_are_poisson_without_frailty():
    # z = 1, eta = 0: N(tau) ~ Poisson(alpha * tau^gamma)
    spec = ScenarioSpec(frailty_variance=0)
    rng = np.random.default_rng(4)
    counts = np.array([len(sample_event_times(0.0, spec, 1.0, rng)) for _ in range(20000)])
    mean = spec.weibull_scale * spec.follow_up**spec.weibull_shape
    assert counts.mean() == pytest.approx(mean, rel=0.03)
    assert counts.var() == pytest.approx(mean, rel=0.06)


def test_event_times_increasing_and_bounded():
    rng = np.random.default_rng(5)
    spec = ScenarioSpec()
    for _ in range(200):
        t = sample_event_times(rng.normal(), spec, rng.gamma(4, 0.25), rng)
        assert all(b > a for a, b in zip(t, t[1:]))
        assert all(0 < x <= spec.follow_up for x in t)


def test_default_follow_up_event_density():
    spec = ScenarioSpec()
    means = [generate_scenario(spec, r)[0].n_events.mean() for r in range(10)]
    assert DEFAULT_FOLLOW_UP == 1.5
    assert 2.0 <= np.mean(means) <= 3.0


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 300), st.sampled_from([0.0, 0.1, 0.2, 0.35, 0.5]), st.integers(0, 10**6))
def test_censoring_rate_exact(n, rate, seed):
    rng = np.random.default_rng(seed)
    spec = ScenarioSpec()
    from recurbench.data import Subject

    subjects = [
        Subject(i, tuple(sample_event_times(0.0, spec, 1.0, rng)), spec.follow_up, np.zeros(1)) for i in range(n)
    ]
    out = apply_censoring(subjects, rate, spec.follow_up, rng)
    censored = sum(s.censoring_time < spec.follow_up for s in out)
    assert censored == round_half_up(rate * n)
    for before, after in zip(subjects, out):
        assert after.event_times == tuple(t for t in before.event_times if t <= after.censoring_time)


def test_generated_dataset_censoring_and_truth():
    spec = ScenarioSpec(n=100, p=20, sparse_rate=0.25)
    data, truth = generate_scenario(spec, 3)
    assert sum(data.followup < spec.follow_up) == 20
    assert list(truth.beta[:5]) == [0.15] * 5 and not truth.beta[5:].any()
    assert list(data.active_mask) == list(truth.beta != 0)
    assert spec.m == 5


def test_generation_deterministic_per_replicate():
    spec = ScenarioSpec(p=10)
    a, _ = generate_scenario(spec, 2)
    b, _ = generate_scenario(spec, 2)
    c, _ = generate_scenario(spec, 3)
    assert a.subjects == b.subjects
    assert a.subjects != c.subjects


def test_substreams_independent_of_order():
    x = substream(1, 5).random(3)
    substream(1, 4).random(10)
    assert np.array_equal(x, substream(1, 5).random(3))


def test_true_beta_rounding():
    assert ScenarioSpec(p=25, sparse_rate=0.25).m == 6  # 6.25 -> 6
    assert ScenarioSpec(p=50, sparse_rate=0.25).m == 13  # 12.5 -> 13
    assert not true_beta(ScenarioSpec(sparse_rate=0)).any()


def test_spec_ini_round_trip(tmp_path):
    spec = ScenarioSpec(p=40, sparse_rate=0.5, frailty_parametrization="shape", seed=9)
    path = tmp_path / "s.ini"
    path.write_text(format_spec(spec))
    assert read_spec(path) == spec


@pytest.mark.parametrize(
    "changes",
    [
        {"n": 1},
        {"sparse_rate": 1.5},
        {"censoring_rate": 1.0},
        {"rho": 1.0},
        {"weibull_shape": 0},
        {"frailty_variance": -1},
        {"frailty_parametrization": "scale"},
        {"follow_up": 0},
    ],
)
def test_spec_validation(changes):
    with pytest.raises(ValueError):
        ScenarioSpec(**changes)


def test_spec_rejects_unknown_key():
    with pytest.raises(ValueError, match="unknown"):
        ScenarioSpec.from_mapping({"q": "1"})


def test_hazard_formula():
    spec = ScenarioSpec(weibull_scale=2.0, weibull_shape=3.0)
    assert cumulative_hazard(2.0, math.log(0.5), spec, 1.5) == pytest.approx(2.0 * 8 * 0.5 * 1.5)
