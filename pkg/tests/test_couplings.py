import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_couplings.couplings import (CouplingMatrix, check_gumbel_max_suboptimal,
                                        coupling_metrics, estimate_gumbel_max_coupling,
                                        gumbel_max_counterfactual_estimate, gumbel_max_diagonal,
                                        independent_coupling, inverse_cdf_coupling,
                                        maximal_coupling, mismatch_cost,
                                        optimal_transport_coupling, variance_cost)
from causal_couplings.gumbel import softmax

from oracles import chi2_pvalue, gumbel_max_joint_mc, inverse_cdf_by_midpoints

CONSTRUCTORS = {
    "independent": lambda p, q, h: independent_coupling(p, q),
    "inverse_cdf": lambda p, q, h: inverse_cdf_coupling(p, q),
    "maximal": lambda p, q, h: maximal_coupling(p, q),
    "optimal_lp": lambda p, q, h: optimal_transport_coupling(p, q, variance_cost(h)),
}


@st.composite
def positive_pairs(draw, kmin=2, kmax=10):
    k = draw(st.integers(kmin, kmax))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    scale = draw(st.sampled_from([0.1, 1.0, 3.0]))
    return softmax(scale * rng.normal(size=k)), softmax(scale * rng.normal(size=k)), rng


def random_pair(rng, k):
    return rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))


# ---- independent -------------------------------------------------------------

def test_independent_uniform():
    c = independent_coupling([0.5, 0.5], [0.5, 0.5])
    np.testing.assert_array_equal(c.joint, np.full((2, 2), 0.25))
    assert coupling_metrics(c, np.zeros(2))["p_mismatch"] == 0.5
    assert c.validate().marginal_error() == 0.0


def test_dimension_mismatch_raises():
    for ctor in (independent_coupling, inverse_cdf_coupling, maximal_coupling):
        with pytest.raises(ValueError):
            ctor([0.5, 0.5], [0.2, 0.3, 0.5])
    with pytest.raises(ValueError):
        independent_coupling([0.5, 0.6], [0.5, 0.5])


# ---- inverse CDF -------------------------------------------------------------

def test_inverse_cdf_example_matches_enumeration_oracle():
    p, q = np.array([0.5, 0.5]), np.array([0.25, 0.75])
    expected = np.array([[0.25, 0.25], [0.0, 0.5]])
    np.testing.assert_allclose(inverse_cdf_by_midpoints(p, q), expected, atol=1e-15)
    np.testing.assert_allclose(inverse_cdf_coupling(p, q).joint, expected, atol=1e-15)


def test_inverse_cdf_equal_marginals_is_diagonal():
    p = np.array([0.1, 0.6, 0.3])
    np.testing.assert_allclose(inverse_cdf_coupling(p, p).joint, np.diag(p), atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(positive_pairs())
def test_inverse_cdf_matches_oracle(pair):
    p, q, _ = pair
    c = inverse_cdf_coupling(p, q)
    assert c.marginal_error() < 1e-12
    np.testing.assert_allclose(c.joint, inverse_cdf_by_midpoints(p, q), atol=1e-12)


def test_inverse_cdf_with_zero_entries():
    p, q = np.array([0.0, 0.5, 0.5]), np.array([0.5, 0.0, 0.5])
    c = inverse_cdf_coupling(p, q)
    np.testing.assert_allclose(c.joint, inverse_cdf_by_midpoints(p, q), atol=1e-15)


# ---- Gumbel-max closed forms -------------------------------------------------

def test_gumbel_max_diagonal_equal_marginals_returns_p():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    np.testing.assert_allclose(gumbel_max_diagonal(p, p), p, atol=1e-15)


def test_gumbel_max_diagonal_example_frozen_and_mc():
    p, q = np.array([0.5, 0.5]), np.array([0.25, 0.75])
    np.testing.assert_allclose(gumbel_max_diagonal(p, q), [0.25, 0.5], atol=1e-15)
    n = 10 ** 6
    mc = np.diag(gumbel_max_joint_mc(np.log(p), np.log(q), n, np.random.default_rng(11)))
    d = np.array([0.25, 0.5])
    assert np.all(np.abs(mc - d) <= 3 * np.sqrt(d * (1 - d) / n))


@settings(max_examples=200, deadline=None)
@given(positive_pairs(kmin=2, kmax=2))
def test_two_outcomes_gumbel_max_is_maximal(pair):
    p, q, _ = pair
    np.testing.assert_allclose(gumbel_max_diagonal(p, q), np.minimum(p, q), atol=1e-12)
    assert not check_gumbel_max_suboptimal(p, q)


def test_gumbel_max_diagonal_rejects_zero():
    with pytest.raises(ValueError):
        gumbel_max_diagonal([0.0, 1.0], [0.5, 0.5])
    with pytest.raises(ValueError):
        check_gumbel_max_suboptimal([0.5, 0.5], [1.0, 0.0])


def test_gumbel_max_diagonal_mc_random_pairs():
    rng = np.random.default_rng(12)
    n = 2 * 10 ** 5
    for k in (3, 5):
        p, q = random_pair(rng, k)
        d = gumbel_max_diagonal(p, q)
        mc = np.diag(gumbel_max_joint_mc(np.log(p), np.log(q), n, rng))
        assert np.all(np.abs(mc - d) <= 4 * np.sqrt(d * (1 - d) / n) + 1e-12)


def _suboptimality_sides(p, q, i):
    others = [j for j in range(len(p)) if j != i]
    lhs = max(sum(p[j] / p[i] for j in others), sum(q[j] / q[i] for j in others))
    rhs = sum(max(p[j] / p[i], q[j] / q[i]) for j in others)
    return lhs, rhs


def test_suboptimality_example():
    p, q = np.full(3, 1 / 3), np.array([0.2, 0.3, 0.5])
    lhs, rhs = _suboptimality_sides(p, q, 1)
    assert lhs == pytest.approx(7 / 3) and rhs == pytest.approx(8 / 3)
    assert check_gumbel_max_suboptimal(p, q) is True
    assert check_gumbel_max_suboptimal(p, p) is False


@settings(max_examples=200, deadline=None)
@given(positive_pairs(kmin=3, kmax=10))
def test_suboptimality_agrees_with_diagonal_gap(pair):
    p, q, _ = pair
    gap = np.minimum(p, q).sum() - gumbel_max_diagonal(p, q).sum()
    assert check_gumbel_max_suboptimal(p, q) == bool(gap > 1e-12)


@settings(max_examples=200, deadline=None)
@given(positive_pairs(kmin=3, kmax=10))
def test_factor_two_bound(pair):
    p, q, _ = pair
    assert np.minimum(p, q).sum() <= 2 * gumbel_max_diagonal(p, q).sum()


# ---- Monte Carlo estimator ---------------------------------------------------

def test_estimate_equal_logits_has_no_off_diagonal_mass():
    l = np.array([0.2, -1.0, 0.7])
    c = estimate_gumbel_max_coupling(l, l, 10 ** 5, np.random.default_rng(0))
    assert c.joint.sum() - np.trace(c.joint) == 0.0


def test_estimate_agrees_with_closed_form_and_marginals():
    rng = np.random.default_rng(1)
    n = 10 ** 6
    l1, l2 = rng.normal(size=4), rng.normal(size=4)
    c = estimate_gumbel_max_coupling(l1, l2, n, rng, chunk=300_000)
    d = gumbel_max_diagonal(softmax(l1), softmax(l2))
    assert np.all(np.abs(np.diag(c.joint) - d) <= 4 * np.sqrt(d * (1 - d) / n))
    assert chi2_pvalue(c.joint.sum(axis=1) * n, softmax(l1)) > 0.01
    assert chi2_pvalue(c.joint.sum(axis=0) * n, softmax(l2)) > 0.01


# ---- maximal coupling --------------------------------------------------------

def test_maximal_example():
    c = maximal_coupling([0.5, 0.5], [0.25, 0.75])
    assert c.p_equal() == pytest.approx(0.75, abs=1e-15)
    p = np.array([0.2, 0.8])
    np.testing.assert_array_equal(maximal_coupling(p, p).joint, np.diag(p))


def test_maximal_mismatch_is_total_variation():
    rng = np.random.default_rng(2)
    for _ in range(100):
        p, q = random_pair(rng, rng.integers(2, 11))
        c = maximal_coupling(p, q)
        assert abs(1 - c.p_equal() - 0.5 * np.abs(p - q).sum()) <= 1e-12
        np.testing.assert_allclose(np.diag(c.joint), np.minimum(p, q), atol=1e-15)


# ---- optimal transport -------------------------------------------------------

def test_optimal_transport_tv_example():
    p, q = np.full(3, 1 / 3), np.array([0.2, 0.3, 0.5])
    c = optimal_transport_coupling(p, q, mismatch_cost(3))
    assert np.sum(c.joint * mismatch_cost(3)) == pytest.approx(1 / 6, abs=1e-12)


def test_optimal_transport_zero_cost_is_feasible():
    p, q = np.array([0.1, 0.9]), np.array([0.6, 0.4])
    c = optimal_transport_coupling(p, q, np.zeros((2, 2)))
    c.validate()
    assert np.sum(c.joint * 0.0) == 0.0


def test_optimal_transport_rejects_non_finite_cost():
    cost = np.zeros((2, 2))
    cost[0, 1] = np.inf
    with pytest.raises(ValueError):
        optimal_transport_coupling([0.5, 0.5], [0.5, 0.5], cost)


# ---- metrics and cross-constructor properties --------------------------------

def test_metrics_independent_variance_adds():
    rng = np.random.default_rng(3)
    p, q = random_pair(rng, 6)
    h1, h2 = rng.normal(size=6), rng.normal(size=6)
    m = coupling_metrics(independent_coupling(p, q), h1, h2)
    var = p @ h1 ** 2 - (p @ h1) ** 2 + q @ h2 ** 2 - (q @ h2) ** 2
    assert m["var_diff"] == pytest.approx(var, abs=1e-12)


def test_metrics_diagonal_zero_variance_and_zero_scores():
    p = np.array([0.3, 0.3, 0.4])
    h = np.array([1.0, -2.0, 5.0])
    c = CouplingMatrix(np.diag(p), p, p)
    assert coupling_metrics(c, h, h)["var_diff"] == 0.0
    assert coupling_metrics(c, np.zeros(3))["mean_diff"] == 0.0
    with pytest.raises(ValueError):
        coupling_metrics(c, np.zeros(2))


@settings(max_examples=60, deadline=None)
@given(positive_pairs(kmin=2, kmax=8))
def test_constructor_invariants_and_lp_minimizes_variance(pair):
    p, q, rng = pair
    h = rng.normal(size=len(p))
    metrics = {}
    for name, ctor in CONSTRUCTORS.items():
        c = ctor(p, q, h)
        c.validate()
        metrics[name] = coupling_metrics(c, h)
    means = [m["mean_diff"] for m in metrics.values()]
    assert max(means) - min(means) <= 1e-12
    best = metrics["optimal_lp"]["var_diff"]
    assert all(best <= m["var_diff"] + 1e-9 for m in metrics.values())


def test_coupling_matrix_validation_errors():
    p = np.array([0.5, 0.5])
    with pytest.raises(ValueError):
        CouplingMatrix(np.array([[0.5, 0.1], [0.0, 0.4]]), p, p).validate()
    with pytest.raises(ValueError):
        CouplingMatrix(np.array([[0.6, -0.1], [-0.1, 0.6]]), p, p).validate()


def test_coupling_csv_roundtrip(tmp_path):
    c = inverse_cdf_coupling([0.2, 0.5, 0.3], [0.6, 0.1, 0.3])
    path = c.to_csv(tmp_path / "c.csv")
    assert path.read_text().splitlines()[0] == "x,y,prob"
    back = CouplingMatrix.from_csv(path)
    np.testing.assert_array_equal(back.joint, c.joint)
    np.testing.assert_array_equal(back.p, c.p)


def test_sampling_from_coupling():
    c = inverse_cdf_coupling([0.5, 0.5], [0.25, 0.75])
    x, y = c.sample(10 ** 5, np.random.default_rng(4))
    assert not np.any((x == 1) & (y == 0))
    y_cf = c.sample_counterfactual(np.ones(1000, dtype=int), np.random.default_rng(5))
    assert np.all(y_cf == 1)
    with pytest.raises(ValueError):
        CouplingMatrix(np.array([[1.0, 0.0], [0.0, 0.0]]), [1.0, 0.0], [1.0, 0.0]) \
            .sample_counterfactual([1])


# ---- counterfactual estimator ------------------------------------------------

def test_counterfactual_estimate_trivial_cases():
    l = np.array([0.1, 0.5, -0.3])
    h = np.array([1.0, 2.0, 4.0])
    res = gumbel_max_counterfactual_estimate(l, l, h, h, 1000, np.random.default_rng(6))
    assert np.all(res["samples"] == 0.0)
    res = gumbel_max_counterfactual_estimate(l, -l, np.zeros(3), np.zeros(3), 10,
                                             np.random.default_rng(6))
    assert res["estimate"] == 0.0
    with pytest.raises(ValueError):
        gumbel_max_counterfactual_estimate(l, l, h, h, 0)


def test_counterfactual_estimate_matches_analytic_expectation():
    rng = np.random.default_rng(7)
    for _ in range(5):
        l1, l2 = rng.normal(size=5), rng.normal(size=5)
        h1, h2 = rng.normal(size=5), rng.normal(size=5)
        res = gumbel_max_counterfactual_estimate(l1, l2, h1, h2, 10 ** 5, rng)
        truth = softmax(l1) @ h1 - softmax(l2) @ h2
        assert abs(res["estimate"] - truth) <= 3 * res["std_error"]
