import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from causal_couplings.gumbel import (gumbel_argmax, gumbel_softmax, log_softmax, logsumexp,
                                     sample_conditional_gumbels, sample_gumbels, softmax,
                                     truncated_topdown)

from oracles import chi2_pvalue

EULER_GAMMA = 0.5772156649015329

logit_vectors = st.lists(st.floats(-8, 8), min_size=2, max_size=8).map(np.array)


def test_sample_gumbels_deterministic():
    a = sample_gumbels(3, np.random.default_rng(5))
    b = sample_gumbels(3, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_sample_gumbels_mean_is_euler_gamma():
    g = sample_gumbels(10 ** 6, np.random.default_rng(0))
    assert abs(g.mean() - EULER_GAMMA) < 0.01
    assert np.all(np.isfinite(g))


def test_transform_at_inverse_e_is_zero():
    assert -np.log(-np.log(np.exp(-1.0))) == pytest.approx(0.0, abs=1e-15)


def test_argmax_simple_and_length_check():
    assert gumbel_argmax(np.zeros(2), np.array([1.0, 0.5])) == 0
    with pytest.raises(ValueError):
        gumbel_argmax(np.zeros(3), np.zeros(2))


def test_argmax_uniform_marginal_chi2():
    g = sample_gumbels((10 ** 6, 6), np.random.default_rng(1))
    counts = np.bincount(gumbel_argmax(np.zeros(6), g), minlength=6)
    assert chi2_pvalue(counts, np.full(6, 1 / 6)) > 0.01


def test_argmax_frequencies_match_probabilities():
    p = np.array([0.2, 0.3, 0.5])
    g = sample_gumbels((10 ** 6, 3), np.random.default_rng(2))
    freq = np.bincount(gumbel_argmax(np.log(p), g), minlength=3) / 10 ** 6
    np.testing.assert_allclose(freq, p, atol=0.005)


def test_argmax_marginal_within_four_sigma():
    rng = np.random.default_rng(3)
    n = 10 ** 6
    for _ in range(3):
        l = rng.normal(size=5)
        p = softmax(l)
        freq = np.bincount(gumbel_argmax(l, sample_gumbels((n, 5), rng)), minlength=5) / n
        assert np.all(np.abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / n))


@settings(max_examples=50, deadline=None)
@given(logit_vectors, st.floats(-100, 100), st.integers(0, 2 ** 32 - 1))
def test_argmax_shift_invariant(l, c, seed):
    g = sample_gumbels((20, len(l)), np.random.default_rng(seed))
    np.testing.assert_array_equal(gumbel_argmax(l + c, g), gumbel_argmax(l, g))


def test_gumbel_softmax_basic():
    np.testing.assert_allclose(gumbel_softmax(np.zeros(4), np.zeros(4), 1.0), np.full(4, 0.25))
    with pytest.raises(ValueError):
        gumbel_softmax(np.zeros(3), np.zeros(3), 0.0)


@settings(max_examples=100, deadline=None)
@given(logit_vectors, st.floats(0.05, 10), st.integers(0, 2 ** 32 - 1))
def test_gumbel_softmax_on_simplex(l, tau, seed):
    y = gumbel_softmax(l, sample_gumbels(len(l), np.random.default_rng(seed)), tau)
    assert abs(y.sum() - 1) < 1e-12 and np.all(y >= 0)


def test_gumbel_softmax_cold_limit_matches_argmax():
    rng = np.random.default_rng(4)
    l = rng.normal(size=(10 ** 4, 6))
    g = sample_gumbels((10 ** 4, 6), rng)
    s = np.sort(l + g, axis=1)
    keep = s[:, -1] - s[:, -2] > 1e-4
    y = gumbel_softmax(l[keep], g[keep], 1e-6)
    onehot = np.eye(6)[np.argmax(l[keep] + g[keep], axis=1)]
    np.testing.assert_allclose(y, onehot, atol=1e-12)


def test_softmax_helpers():
    l = np.array([1.0, 2.0, -np.inf])
    np.testing.assert_allclose(softmax(l), [1 / (1 + np.e), np.e / (1 + np.e), 0.0])
    assert logsumexp(np.array([0.0, 0.0])) == pytest.approx(np.log(2))
    np.testing.assert_allclose(np.exp(log_softmax(np.array([3.0, 3.0]))), [0.5, 0.5])


@settings(max_examples=100, deadline=None)
@given(logit_vectors, st.data())
def test_conditional_gumbels_reproduce_observation(l, data):
    obs = data.draw(st.integers(0, len(l) - 1))
    seed = data.draw(st.integers(0, 2 ** 32 - 1))
    g = sample_conditional_gumbels(np.broadcast_to(l, (50, len(l))), np.full(50, obs),
                                   np.random.default_rng(seed))
    assert np.all(gumbel_argmax(l, g) == obs)


def test_conditional_gumbels_always_reproduce_1e5():
    rng = np.random.default_rng(6)
    l = 3 * rng.normal(size=(10 ** 5, 7))
    obs = rng.integers(0, 7, size=10 ** 5)
    g = sample_conditional_gumbels(l, obs, rng)
    assert np.all(gumbel_argmax(l, g) == obs)


def test_conditional_gumbels_extreme_logits():
    l = np.array([500.0, -500.0, 0.0, 499.9999999])
    for obs in range(4):
        g = sample_conditional_gumbels(np.tile(l, (200, 1)), np.full(200, obs),
                                       np.random.default_rng(obs))
        assert np.all(gumbel_argmax(l, g) == obs)


def test_conditional_gumbels_handle_impossible_entries():
    l = np.array([0.0, -np.inf, 1.0])
    g = sample_conditional_gumbels(np.tile(l, (1000, 1)), np.full(1000, 2),
                                   np.random.default_rng(7))
    assert np.all(np.isfinite(g)) and np.all(gumbel_argmax(l, g) == 2)
    with pytest.raises(ValueError):
        sample_conditional_gumbels(l, 1, np.random.default_rng(0))


def test_conditional_gumbels_index_out_of_range():
    with pytest.raises(IndexError):
        sample_conditional_gumbels(np.zeros(3), 3, np.random.default_rng(0))
    with pytest.raises(IndexError):
        sample_conditional_gumbels(np.zeros(3), -1, np.random.default_rng(0))


def test_conditional_max_is_gumbel_of_logsumexp():
    n = 10 ** 5
    l = np.zeros(2)
    g = sample_conditional_gumbels(np.zeros((n, 2)), np.zeros(n, dtype=int),
                                   np.random.default_rng(8))
    top = (l + g).max(axis=1)
    assert stats.kstest(top, stats.gumbel_r(loc=np.log(2)).cdf).pvalue > 0.01


def test_conditional_gumbels_marginalize_to_prior():
    n = 10 ** 5
    rng = np.random.default_rng(9)
    l = np.array([0.3, -1.0, 1.2, 0.0])
    obs = rng.choice(4, size=n, p=softmax(l))
    g = sample_conditional_gumbels(np.tile(l, (n, 1)), obs, rng)
    for j in range(4):
        assert stats.kstest(g[:, j], stats.gumbel_r.cdf).pvalue > 0.01


def test_truncated_topdown_respects_top():
    rng = np.random.default_rng(10)
    l = rng.normal(size=(1000, 5))
    obs = rng.integers(0, 5, size=1000)
    top = rng.normal(size=1000) + 3
    g = truncated_topdown(l, obs, top, rng)
    s = l + g
    np.testing.assert_allclose(s[np.arange(1000), obs], top, rtol=0, atol=1e-12)
    assert np.all(np.argmax(s, axis=1) == obs)
