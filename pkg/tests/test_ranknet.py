import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recurbench import ranknet as rn
from recurbench.data import RecurrentDataset, Subject
from recurbench.metrics import harrell_c


def samples_from(obs, cens=None, X=None):
    obs = np.asarray(obs, dtype=float)
    cens = np.zeros(obs.size, dtype=int) if cens is None else np.asarray(cens)
    X = np.zeros((obs.size, 1)) if X is None else np.asarray(X, dtype=float)
    return [rn.SurvSample(x, float(t), int(c)) for x, t, c in zip(X, obs, cens)]


def brute_loss(pred, obs, cens, a1=1.0, a2=1.0):
    n = len(pred)
    l1 = sum((pred[i] - obs[i]) ** 2 for i in range(n) if cens[i] or pred[i] < obs[i]) / n
    l2 = 0.0
    for i, j in itertools.product(range(n), repeat=2):
        if i != j and obs[j] - obs[i] > pred[j] - pred[i]:
            l2 += ((obs[j] - obs[i]) - (pred[j] - pred[i])) ** 2
    return a1 * l1 + a2 * l2 / n


# -- forward ---------------------------------------------------------------------


def test_zero_network_predicts_log2():
    net = rn.Network.zeros(rn.NetworkSpec((3, 4, 4, 1)))
    X = np.random.default_rng(0).normal(size=(5, 3))
    assert np.allclose(net.predict(X), math.log(2.0))


def test_single_layer_hand_value():
    net = rn.Network.zeros(rn.NetworkSpec((2, 1)))
    net.weights[0][:] = [[0.5], [-1.0]]
    net.biases[0][:] = 0.25
    # softplus(0.5 * 2 - 1 * 0.5 + 0.25) = softplus(0.75)
    assert rn.forward(net, [2.0, 0.5]) == pytest.approx(math.log1p(math.exp(0.75)))


def test_forward_deterministic_and_positive():
    spec = rn.NetworkSpec((4, 8, 1))
    net = rn.Network.init(spec, np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=4)
    assert rn.forward(net, x) == rn.forward(net, x.copy())
    assert np.all(net.predict(np.random.default_rng(3).normal(size=(50, 4)) * 10) >= 0)


def test_forward_checks_input_length():
    net = rn.Network.zeros(rn.NetworkSpec((3, 1)))
    with pytest.raises(ValueError):
        rn.forward(net, [1.0, 2.0])


# -- loss ------------------------------------------------------------------------


def test_loss_hand_example():
    spec = rn.NetworkSpec((1, 1), mu=0.0)
    assert rn.rank_loss([1.0, 2.0], samples_from([1.0, 3.0]), spec) == pytest.approx(1.0)
    spec = rn.NetworkSpec((1, 1), alpha1=2.0, alpha2=3.0, mu=0.0)
    assert rn.rank_loss([1.0, 2.0], samples_from([1.0, 3.0]), spec) == pytest.approx(2 * 0.5 + 3 * 0.5)


def test_perfect_fit_leaves_only_weight_penalty():
    spec = rn.NetworkSpec((1, 3, 1), mu=0.01)
    net = rn.Network.init(spec, np.random.default_rng(0))
    obs = [1.0, 2.0, 5.0]
    penalty = 0.01 * sum(np.sum(W**2) for W in net.weights)
    assert rn.rank_loss(obs, samples_from(obs), spec, net) == pytest.approx(penalty)


def test_all_censored_enter_first_term():
    spec = rn.NetworkSpec((1, 1), alpha2=0.0, mu=0.0)
    # over-predictions count only because the samples are censored
    assert rn.rank_loss([2.0, 4.0], samples_from([1.0, 1.0], [1, 1]), spec) == pytest.approx((1 + 9) / 2)
    assert rn.rank_loss([2.0, 4.0], samples_from([1.0, 1.0], [0, 0]), spec) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10**6))
def test_loss_matches_brute_force_and_is_order_invariant(n, seed):
    rng = np.random.default_rng(seed)
    obs = rng.uniform(0.1, 3, n)
    pred = rng.uniform(0.1, 3, n)
    cens = rng.integers(0, 2, n)
    spec = rn.NetworkSpec((1, 1), alpha1=0.7, alpha2=1.3, mu=0.0)
    got = rn.rank_loss(pred, samples_from(obs, cens), spec)
    assert got == pytest.approx(brute_loss(pred, obs, cens, 0.7, 1.3), rel=1e-12)
    perm = rng.permutation(n)
    assert rn.rank_loss(pred[perm], samples_from(obs[perm], cens[perm]), spec) == pytest.approx(got, rel=1e-12)


def test_pair_term_equals_residual_spread():
    # exactly one of (i, j), (j, i) passes the indicator unless residuals tie,
    # so the pair term is the sum of squared deviations of the residuals
    rng = np.random.default_rng(4)
    obs, pred = rng.uniform(0.1, 3, 30), rng.uniform(0.1, 3, 30)
    spec = rn.NetworkSpec((1, 1), alpha1=1.0, alpha2=1.0, mu=0.0)
    full = rn.rank_loss(pred, samples_from(obs), spec)
    l1 = rn.rank_loss(pred, samples_from(obs), spec.replace(alpha2=0.0))
    r = pred - obs
    assert full - l1 == pytest.approx(np.sum((r - r.mean()) ** 2), rel=1e-10)


def test_loss_requires_alignment():
    with pytest.raises(ValueError):
        rn.rank_loss([1.0], samples_from([1.0, 2.0]), rn.NetworkSpec((1, 1)))


# -- backprop --------------------------------------------------------------------


@pytest.mark.parametrize("activation", sorted(rn.ACTIVATIONS))
def test_backprop_matches_finite_differences(activation):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        spec = rn.NetworkSpec((2, 4, 1), activation=activation, mu=0.05)
        net = rn.Network.init(spec, rng, output_bias=0.5)
        X = rng.normal(size=(3, 2))
        y = rng.uniform(0.3, 2.0, 3)
        c = np.array([0, 1, 0], dtype=bool)
        _, gW, gb = rn.loss_and_grad(net, X, y, c, spec)
        g = np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(gW, gb)])
        theta = net.flat()
        fd = np.zeros_like(theta)
        h = 1e-6
        for k in range(theta.size):
            e = np.zeros_like(theta)
            e[k] = h
            fd[k] = (
                rn._loss_only(net.with_flat(theta + e), X, y, c, spec)
                - rn._loss_only(net.with_flat(theta - e), X, y, c, spec)
            ) / (2 * h)
        worst = max(worst, np.max(np.abs(fd - g)) / max(np.max(np.abs(g)), 1e-12))
    assert worst < 1e-4


# -- training --------------------------------------------------------------------


def test_full_batch_history_non_increasing():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(30, 3))
    obs = np.exp(0.5 * X[:, 0]) + 0.1
    net = rn.train(samples_from(obs, X=X), rn.NetworkSpec((3, 6, 1), epochs=200), np.random.default_rng(0))
    h = np.array(net.history)
    assert np.all(np.diff(h) <= 0)
    assert h[-1] < h[0]


def test_training_deterministic_given_seed():
    X = np.random.default_rng(7).normal(size=(20, 2))
    s = samples_from(np.abs(X[:, 0]) + 0.5, X=X)
    spec = rn.NetworkSpec((2, 4, 1), epochs=50, batch=8)
    a = rn.train(s, spec, np.random.default_rng(3))
    b = rn.train(s, spec, np.random.default_rng(3))
    assert np.array_equal(a.flat(), b.flat())


def test_separable_toy_is_ranked():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(40, 1))
    obs = np.where(X[:, 0] > 0, 5.0, 1.0)
    net = rn.train(samples_from(obs, X=X), rn.NetworkSpec((1, 8, 8, 1), epochs=500), np.random.default_rng(1))
    pred = net.predict(X)
    pairs = [(i, j) for i in range(40) for j in range(40) if obs[i] < obs[j]]
    assert np.mean([pred[i] < pred[j] for i, j in pairs]) >= 0.9


def test_large_weight_decay_flattens_predictions():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(30, 3))
    s = samples_from(np.exp(X[:, 0]), X=X)
    free = rn.train(s, rn.NetworkSpec((3, 5, 1), epochs=300, mu=0.0), np.random.default_rng(2))
    tight = rn.train(s, rn.NetworkSpec((3, 5, 1), epochs=300, mu=100.0), np.random.default_rng(2))
    assert sum(np.sum(W**2) for W in tight.weights) < 1e-3
    assert np.ptp(tight.predict(X)) < 0.01 * np.ptp(free.predict(X))


def test_one_sided_regression_without_pair_term():
    # alpha2 = 0, no censoring: only under-prediction is penalized, so the
    # trained linear network should leave (almost) no negative residuals
    rng = np.random.default_rng(10)
    X = rng.normal(size=(60, 2))
    obs = np.log1p(np.exp(X @ [0.8, -0.5] + 1.0)) + rng.normal(0, 0.05, 60)
    obs = np.abs(obs) + 0.01
    spec = rn.NetworkSpec((2, 1), alpha2=0.0, mu=0.0, epochs=2000)
    net = rn.train(samples_from(obs, X=X), spec, np.random.default_rng(0))
    resid = net.predict(X) - obs
    direct = np.sum(np.minimum(resid, 0.0) ** 2) / obs.size
    assert net.history[-1] == pytest.approx(direct, rel=1e-9, abs=1e-15)
    assert direct < 1e-3 * np.mean(obs**2)
    assert np.mean(resid >= -1e-3) > 0.9


def test_training_rejects_tiny_input():
    with pytest.raises(ValueError):
        rn.train(samples_from([1.0]), rn.NetworkSpec((1, 1)), np.random.default_rng(0))


def test_spec_validation():
    with pytest.raises(ValueError):
        rn.NetworkSpec((3, 2))
    with pytest.raises(ValueError):
        rn.NetworkSpec((3, 1), activation="gelu")
    with pytest.raises(ValueError):
        rn.NetworkSpec((3, 1), mu=-1)
    assert rn.NetworkSpec.default(50).layer_sizes == (50, 32, 32, 1)
    assert rn.NetworkSpec.default(10).layer_sizes == (10, 10, 10, 1)


def test_sample_validation():
    with pytest.raises(ValueError):
        rn.SurvSample(np.zeros(1), 0.0, 0)


# -- data conversion and risk ------------------------------------------------------


def dataset():
    subs = (
        Subject(1, (0.5, 1.2), 2.0, [1.0]),
        Subject(2, (), 1.5, [0.0]),
        Subject(3, (0.7,), 0.7, [-1.0]),
    )
    return RecurrentDataset(subs, 1)


def test_gap_samples():
    s = rn.to_samples(dataset(), "gap")
    got = [(round(x.observed_time, 10), x.censored) for x in s]
    assert got == [(0.5, 0), (0.7, 0), (0.8, 1), (1.5, 1), (0.7, 0)]


def test_first_event_samples():
    s = rn.to_samples(dataset(), "first")
    assert [(x.observed_time, x.censored) for x in s] == [(0.5, 0), (1.5, 1), (0.7, 0)]
    with pytest.raises(ValueError):
        rn.to_samples(dataset(), "last")


def test_predict_risk_sign_and_permutation():
    net = rn.Network.zeros(rn.NetworkSpec((1, 1)))
    net.weights[0][:] = 2.0
    data = dataset()
    risk = rn.predict_risk(net, data)
    # larger x, longer predicted time, lower risk
    assert risk[0] < risk[1] < risk[2]
    perm = [2, 0, 1]
    assert np.array_equal(rn.predict_risk(net, data.subset(perm)), risk[perm])


def test_constant_network_hits_tie_convention():
    net = rn.Network.zeros(rn.NetworkSpec((1, 1)))
    data = dataset()
    risk = rn.predict_risk(net, data)
    assert np.ptp(risk) == 0
    c, n = harrell_c([1, 2, 3], [1, 1, 1], risk)
    assert c == 0.0 and n == 3


def test_network_json_round_trip():
    net = rn.Network.init(rn.NetworkSpec((3, 4, 1), activation="tanh"), np.random.default_rng(0))
    back = rn.Network.from_json(net.to_json())
    X = np.random.default_rng(1).normal(size=(5, 3))
    assert np.array_equal(back.predict(X), net.predict(X))
    assert back.activation == "tanh" and back.layer_sizes == (3, 4, 1)
