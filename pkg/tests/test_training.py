import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_couplings import training as tr
from causal_couplings.couplings import coupling_metrics, independent_coupling
from causal_couplings.gumbel import softmax
from causal_couplings.mechanisms import make_mechanism

from oracles import adam_by_hand, central_difference


class StubRng:
    """Replays fixed uniform draws."""

    def __init__(self, draws):
        self.draws = np.asarray(draws, dtype=float)

    def random(self, k):
        assert k == len(self.draws)
        return self.draws.copy()


def small(kind, seed=0, k=4, z=3, scale=1.0):
    return tr.init_gadget(kind, k, z, (8, 8), np.random.default_rng(seed), out_scale=scale)


# ---- rewards -----------------------------------------------------------------

def test_reward_monotone_frozen_example():
    np.testing.assert_allclose(tr.reward_monotone(3, StubRng([0.2, 0.5, 0.1])), [0.2, 0.7, 0.8],
                               atol=1e-15)
    assert np.all(tr.reward_monotone(4, StubRng(np.zeros(4))) == 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 50), st.integers(0, 2 ** 32 - 1))
def test_reward_monotone_nondecreasing(k, seed):
    assert np.all(np.diff(tr.reward_monotone(k, np.random.default_rng(seed))) >= 0)


def test_reward_nonmonotone():
    h = tr.reward_nonmonotone(100, np.random.default_rng(0))
    assert np.all(np.abs(h) <= 1)
    np.testing.assert_array_equal(h, tr.reward_nonmonotone(100, np.random.default_rng(0)))

    class Zeros:
        def standard_normal(self, k):
            return np.zeros(k)

    assert np.all(tr.reward_nonmonotone(5, Zeros()) == 0)
    np.testing.assert_allclose(tr.reward_nonmonotone(3, Zeros(), "sin_plus_gaussian"),
                               np.sin(30.0 * np.arange(3)))
    with pytest.raises(ValueError):
        tr.reward_nonmonotone(3, Zeros(), "cosine")


# ---- query sources -----------------------------------------------------------

def test_mirrored_pairs_are_reversed_exactly():
    l1, l2 = tr.MirroredPairs(6).sample(20, np.random.default_rng(1))
    np.testing.assert_array_equal(l2, l1[:, ::-1])


def test_perturbed_pair_zero_rho_is_fixed_and_noise_is_unit_variance():
    a, b = np.arange(4.0), -np.arange(4.0)
    l1, l2 = tr.PerturbedPair(a, b, 0.0).sample(5, np.random.default_rng(2))
    assert np.all(l1 == a) and np.all(l2 == b)
    l1, l2 = tr.PerturbedPair(a, b, 2.0).sample(10 ** 5, np.random.default_rng(2))
    assert abs(((l1 - a) / 2.0).std() - 1) < 0.01 and abs(((l2 - b) / 2.0).mean()) < 0.01


def test_pair_list_and_independent_pairs():
    pairs = [(np.zeros(3), np.ones(3)), (np.ones(3), np.zeros(3))]
    l1, l2 = tr.PairList(pairs).sample(50, np.random.default_rng(3))
    assert l1.shape == (50, 3) and np.all(l1 + l2 == 1)
    l1, l2 = tr.IndependentPairs(5, 2.0).sample(10, np.random.default_rng(3))
    assert np.all(np.isfinite(l1)) and l2.shape == (10, 5)


# ---- surrogate ---------------------------------------------------------------

@pytest.mark.parametrize("kind", ["gadget1", "gadget2"])
def test_surrogate_constant_loss(kind):
    rng = np.random.default_rng(4)
    params = small(kind)
    l1, l2 = tr.IndependentPairs(4).sample(6, rng)
    noise = tr.sample_noise(params, 6, 5, rng)
    assert tr.surrogate_loss(params, l1, l2, noise, np.zeros((4, 4))) == 0.0
    assert tr.surrogate_loss(params, l1, l2, noise, np.full((4, 4), 2.5)) == pytest.approx(2.5)
    for g in tr.gradient(params, l1, l2, noise, np.full((4, 4), 2.5)):
        assert np.abs(g).max() <= 1e-10
    with pytest.raises(ValueError):
        tr.surrogate_loss(params, l1, l2, noise, np.zeros((4, 4)), temperature=0.0)


@pytest.mark.parametrize("kind", ["gadget1", "gadget2"])
def test_cold_surrogate_matches_hard_loss(kind):
    rng = np.random.default_rng(5)
    params = small(kind, scale=2.0)
    l1, l2 = tr.IndependentPairs(4).sample(8, rng)
    noise = tr.sample_noise(params, 8, 10, rng)
    loss = tr.squared_difference_loss(rng.normal(size=4))
    cold = tr.surrogate_loss(params, l1, l2, noise, loss, temperature=1e-6)
    assert abs(cold - tr.hard_loss(params, l1, l2, noise, loss)) <= 1e-6


def test_surrogate_accepts_per_pair_loss_tables():
    rng = np.random.default_rng(6)
    params = small("gadget2")
    l1, l2 = tr.IndependentPairs(4).sample(3, rng)
    noise = tr.sample_noise(params, 3, 4, rng)
    h = rng.normal(size=4)
    shared = tr.surrogate_loss(params, l1, l2, noise, tr.squared_difference_loss(h))
    per_pair = np.stack([tr.squared_difference_loss(h)] * 3)
    assert tr.surrogate_loss(params, l1, l2, noise, per_pair) == pytest.approx(shared, abs=1e-14)


@pytest.mark.parametrize("kind", ["gadget1", "gadget2"])
def test_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(7)
    params = small(kind, seed=7)
    l1, l2 = tr.IndependentPairs(4).sample(3, rng)
    noise = tr.sample_noise(params, 3, 4, rng)
    loss = tr.squared_difference_loss(rng.normal(size=4))
    analytic = tr.gradient(params, l1, l2, noise, loss)
    numeric = central_difference(
        lambda flat: tr.surrogate_loss(params.with_params(flat), l1, l2, noise, loss),
        [np.array(p) for p in params.params()])
    a = np.concatenate([g.ravel() for g in analytic])
    n = np.concatenate([g.ravel() for g in numeric])
    assert np.abs(a - n).max() / np.abs(n).max() <= 1e-4


def test_gradient_is_deterministic():
    rng = np.random.default_rng(8)
    params = small("gadget2")
    l1, l2 = tr.IndependentPairs(4).sample(3, rng)
    noise = tr.sample_noise(params, 3, 4, rng)
    loss = tr.mismatch_loss(4)
    for a, b in zip(tr.gradient(params, l1, l2, noise, loss),
                    tr.gradient(params, l1, l2, noise, loss)):
        np.testing.assert_array_equal(a, b)


# ---- adam --------------------------------------------------------------------

def test_adam_first_step_is_minus_learning_rate():
    state = tr.OptimizerState.zeros_like([np.zeros(())])
    _, (new,) = tr.adam_step(state, [np.array(0.0)], [np.array(1.0)], learning_rate=0.01)
    assert float(new) == pytest.approx(-0.01, abs=1e-6)
    assert float(new) == pytest.approx(adam_by_hand(0.0, [1.0], 0.01)[1], abs=1e-15)


def test_adam_matches_hand_written_trajectory():
    grads = [0.3, -1.2, 0.7, 0.0, 2.0]
    state = tr.OptimizerState.zeros_like([np.zeros(())])
    p = [np.array(1.5)]
    traj = [1.5]
    for g in grads:
        state, p = tr.adam_step(state, p, [np.array(g)], learning_rate=0.05)
        traj.append(float(p[0]))
    np.testing.assert_allclose(traj, adam_by_hand(1.5, grads, 0.05), atol=1e-15)


def test_adam_zero_gradient_and_shape_errors():
    state = tr.OptimizerState.zeros_like([np.ones(3)])
    _, (new,) = tr.adam_step(state, [np.ones(3)], [np.zeros(3)])
    np.testing.assert_array_equal(new, np.ones(3))
    with pytest.raises(ValueError):
        tr.adam_step(state, [np.ones(3)], [np.zeros(2)])


# ---- training loop -----------------------------------------------------------

def test_zero_iterations_returns_initial_params():
    params = small("gadget2")
    query = tr.QuerySpec(tr.MirroredPairs(4), tr.mismatch_loss(4))
    out, history = tr.train(params, query, tr.TrainConfig(iterations=0))
    assert history == []
    for a, b in zip(out.params(), params.params()):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("kind", ["gadget1", "gadget2"])
def test_training_is_deterministic_and_keeps_marginals(kind):
    query = tr.QuerySpec(tr.IndependentPairs(4), tr.squared_difference_loss(np.arange(4.0)))
    cfg = tr.TrainConfig(iterations=30, batch_pairs=8, noise_draws_per_pair=4,
                         learning_rate=1e-2, check_every=10, seed=3)
    a, ha = tr.train(small(kind), query, cfg)
    b, hb = tr.train(small(kind), query, cfg)
    assert ha == hb and np.all(np.isfinite(ha))
    for x, y in zip(a.params(), b.params()):
        np.testing.assert_array_equal(x, y)
    logits = np.random.default_rng(0).normal(size=(20, 4))
    assert tr.marginal_error(a, logits) <= 1e-10


def test_train_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(temperature=0.0)
    with pytest.raises(ValueError):
        tr.TrainConfig(batch_pairs=0)
    with pytest.raises(ValueError):
        tr.init_gadget("gadget3", 4)


def test_non_finite_loss_aborts():
    params = small("gadget2")
    loss = np.zeros((4, 4))
    loss[0, 1] = np.nan
    query = tr.QuerySpec(tr.IndependentPairs(4), loss)
    with pytest.raises(tr.TrainingDiverged):
        tr.train(params, query, tr.TrainConfig(iterations=3, batch_pairs=4))


def test_smoke_mirrored_training_beats_gumbel_max():
    k = 5
    h = np.arange(k, dtype=float)
    query = tr.QuerySpec(tr.MirroredPairs(k), tr.squared_difference_loss(h))
    params = tr.init_gadget("gadget2", k, 5, (32, 32), np.random.default_rng(0))
    cfg = tr.TrainConfig(iterations=2000, learning_rate=3e-3, seed=0)
    params, history = tr.train(params, query, cfg)
    assert np.all(np.isfinite(history))
    rng = np.random.default_rng(99)
    held = list(zip(*tr.MirroredPairs(k).sample(200, rng)))
    learned = tr.evaluate_variance(make_mechanism("gadget2", params).sample_pairs, held, h, 1000,
                                   np.random.default_rng(1))
    baseline = tr.evaluate_variance(make_mechanism("gumbel_max").sample_pairs, held, h, 1000,
                                    np.random.default_rng(1))
    assert learned["variance"] < baseline["variance"]


# ---- evaluation --------------------------------------------------------------

def test_evaluate_variance_identical_sides_is_zero():
    l = np.array([0.1, 0.4, -1.0])
    res = tr.evaluate_variance(make_mechanism("gumbel_max").sample_pairs, [(l, l)] * 3,
                               np.array([1.0, 5.0, -2.0]), 500, np.random.default_rng(0))
    assert res["variance"] == 0.0 and res["mean"] == 0.0
    with pytest.raises(ValueError):
        tr.evaluate_variance(None, [(l, l)], np.zeros(3), 1)


def test_evaluate_variance_independent_matches_analytic():
    rng = np.random.default_rng(10)
    l1, l2 = rng.normal(size=4), rng.normal(size=4)
    h = rng.normal(size=4)
    n = 10 ** 5
    res = tr.evaluate_variance(make_mechanism("independent").sample_pairs, [(l1, l2)], h, n, rng)
    truth = coupling_metrics(independent_coupling(softmax(l1), softmax(l2)), h)
    # variance of the sample variance: (mu4 - sigma^4) / n for the difference d
    d = h[:, None] - h[None, :]
    w = np.outer(softmax(l1), softmax(l2))
    mu4 = np.sum(w * (d - truth["mean_diff"]) ** 4)
    se_var = np.sqrt((mu4 - truth["var_diff"] ** 2) / n)
    assert abs(res["variance"] - truth["var_diff"]) <= 3 * se_var
    se_mean = np.sqrt(truth["var_diff"] / n)
    assert abs(res["mean"] - truth["mean_diff"]) <= 3 * se_mean
