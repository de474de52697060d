from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import brentq

from doslab.transport import (TransportConfig, alpha_at, column_normalize, sinkhorn_diagnostics,
                              sinkhorn_plan, uniform_sinkhorn, zipf_prior, zipf_sinkhorn)

positive = arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 6)),
                  elements=st.floats(0.01, 100.0))


def test_zipf_prior_k4_alpha1_matches_rationals():
    h4 = sum(Fraction(1, k) for k in range(1, 5))
    exact = [float(Fraction(1, k) / h4) for k in range(1, 5)]
    w = zipf_prior(4, 1.0).weights
    np.testing.assert_allclose(w, exact, atol=1e-12, rtol=0)
    np.testing.assert_allclose(w, [0.48, 0.24, 0.16, 0.12], atol=1e-12, rtol=0)


def test_zipf_prior_alpha0_is_uniform():
    for k in (1, 2, 7, 64):
        np.testing.assert_allclose(zipf_prior(k, 0.0).weights, np.full(k, 1 / k), atol=1e-12, rtol=0)


def test_zipf_prior_single_prototype():
    assert zipf_prior(1, 2.5).weights.tolist() == [1.0]


@given(st.integers(1, 200), st.floats(0, 5))
def test_zipf_prior_invariants(k, alpha):
    w = zipf_prior(k, alpha).weights
    assert np.all(w > 0)
    assert abs(w.sum() - 1) < 1e-12
    assert np.all(np.diff(w) <= 1e-15)


def test_zipf_prior_rejects_bad_args():
    with pytest.raises(ValueError):
        zipf_prior(0, 1.0)
    with pytest.raises(ValueError):
        zipf_prior(3, -0.1)


def _two_by_two_oracle(f, w):
    # scale columns by (1, t); rows equalize; solve col1/col2 = w1/w2 for t
    def gap(t):
        r = 1.0 / (f[:, 0] + t * f[:, 1])
        return np.sum(r * f[:, 0]) / np.sum(r * t * f[:, 1]) - w[0] / w[1]

    t = brentq(gap, 1e-9, 1e9, xtol=1e-15, rtol=1e-15)
    p = f * np.array([1.0, t]) / (f[:, :1] + t * f[:, 1:])
    return p / p.sum(axis=0)


def test_two_by_two_fixed_point():
    f = np.array([[1.0, 2.0], [3.0, 4.0]])
    w = zipf_prior(2, 1.0).weights
    np.testing.assert_allclose(w, [2 / 3, 1 / 3], atol=1e-15)
    out = zipf_sinkhorn(f, zipf_prior(2, 1.0), 1000)
    oracle = _two_by_two_oracle(f, w)
    np.testing.assert_allclose(out, oracle, atol=1e-10)
    np.testing.assert_allclose(out[:, 0], [0.46636, 0.53364], atol=1e-4)
    np.testing.assert_allclose(out[:, 1], [0.56727, 0.43273], atol=1e-4)
    # cross-ratio of the plan equals that of F at the fixed point
    plan = sinkhorn_plan(f, w, 1000)
    cr = plan[0, 0] * plan[1, 1] / (plan[0, 1] * plan[1, 0])
    assert cr == pytest.approx(4 / 6, rel=1e-12)


def test_random_instance_marginals():
    rng = np.random.default_rng(3)
    f = rng.uniform(0.1, 5.0, (64, 8))
    prior = zipf_prior(8, 1.3)
    plan = sinkhorn_plan(f, prior.weights, 50)
    diag = sinkhorn_diagnostics(plan, prior.weights)
    assert diag["row_spread"] < 1e-6
    assert diag["col_deviation"] < 1e-12
    np.testing.assert_allclose(plan.sum(axis=0), prior.weights, atol=1e-12, rtol=0)


def test_alpha_zero_equals_uniform_sinkhorn():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n, k = rng.integers(2, 40), rng.integers(2, 12)
        f = np.exp(rng.normal(0, 2, (n, k)))
        iters = int(rng.integers(1, 20))
        a = zipf_sinkhorn(f, zipf_prior(k, 0.0), iters)
        b = uniform_sinkhorn(f, iters)
        np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)


def test_constant_matrix_is_uniform():
    out = zipf_sinkhorn(np.full((5, 3), 2.0), zipf_prior(3, 0.0), 3)
    np.testing.assert_allclose(out, np.full((5, 3), 0.2), atol=1e-15)
    plan = sinkhorn_plan(np.full((5, 3), 2.0), zipf_prior(3, 0.0).weights, 1)
    assert sinkhorn_diagnostics(plan, zipf_prior(3, 0.0).weights)["row_spread"] == pytest.approx(0, abs=1e-15)


def test_single_prototype_is_uniform_over_points():
    # the row step sends every entry of a one-column matrix to 1
    f = np.array([[1.0], [3.0], [4.0]])
    for a in (0.0, 2.0):
        np.testing.assert_allclose(zipf_sinkhorn(f, zipf_prior(1, a), 5)[:, 0], np.full(3, 1 / 3))


def test_non_positive_entries_rejected():
    with pytest.raises(ValueError):
        sinkhorn_plan(np.array([[1.0, 0.0]]), np.array([0.5, 0.5]), 3)
    with pytest.raises(ValueError):
        sinkhorn_plan(np.ones((2, 3)), np.array([0.5, 0.5]), 3)


@given(positive, st.floats(0, 3), st.floats(1e-3, 1e3))
@settings(max_examples=60, deadline=None)
def test_scale_invariance(f, alpha, c):
    prior = zipf_prior(f.shape[1], alpha)
    np.testing.assert_allclose(zipf_sinkhorn(c * f, prior, 4), zipf_sinkhorn(f, prior, 4),
                               rtol=1e-9, atol=1e-12)


@given(positive, st.floats(0, 3), st.randoms(use_true_random=False))
@settings(max_examples=60, deadline=None)
def test_permutation_equivariance(f, alpha, rnd):
    perm = list(range(f.shape[0]))
    rnd.shuffle(perm)
    prior = zipf_prior(f.shape[1], alpha)
    np.testing.assert_allclose(zipf_sinkhorn(f[perm], prior, 4), zipf_sinkhorn(f, prior, 4)[perm],
                               rtol=1e-10, atol=1e-13)


@given(positive, st.floats(0, 3))
@settings(max_examples=60, deadline=None)
def test_output_is_column_stochastic(f, alpha):
    out = zipf_sinkhorn(f, zipf_prior(f.shape[1], alpha), 3)
    np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-12)
    assert np.all(out >= 0)


def test_larger_alpha_starves_last_prototype():
    rng = np.random.default_rng(5)
    f = rng.uniform(0.2, 2.0, (30, 6))
    shares = []
    for a in (0.0, 0.5, 1.0, 1.5, 2.0, 3.0):
        plan = sinkhorn_plan(f, zipf_prior(6, a).weights, 3)
        shares.append(plan[:, -1].sum() / plan.sum())
    assert all(b < a for a, b in zip(shares, shares[1:]))


def test_column_normalize_floor():
    out = column_normalize(np.array([[0.0, 1.0], [0.0, 3.0]]))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out[:, 1], [0.25, 0.75])


def test_alpha_schedule():
    cfg = TransportConfig(alpha=1.3)
    assert alpha_at(cfg, 0.0) == alpha_at(cfg, 1.0) == 1.3
    lin = TransportConfig(alpha=0.0, alpha_final=2.0)
    assert alpha_at(lin, 0.0) == 0.0
    assert alpha_at(lin, 0.5) == pytest.approx(1.0)
    assert alpha_at(lin, 1.0) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        TransportConfig(iters=0)
