"""Query distributions, the relaxed surrogate objective, gradients, Adam and training."""
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .gadgets import (Gadget1Parameters, Gadget2Parameters, _safe_log, gadget1_joint,
                      gadget1_log_joint, gadget1_sample_pair, gadget2_clusters,
                      gadget2_conditional, gadget2_sample_pair)
from .gumbel import as_rng, sample_gumbels, softmax

log = logging.getLogger(__name__)

GADGET_KINDS = ("gadget1", "gadget2")


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------- rewards

def reward_monotone(k, rng=None):
    """Nondecreasing scores: cumulative sum of ``k`` uniform draws."""
    return np.cumsum(as_rng(rng).random(k))


def reward_nonmonotone(k, rng=None, variant="sin_of_gaussian"):
    """Non-monotone scores from ``k`` standard normal draws ``g``.

    ``variant="sin_of_gaussian"`` gives ``sin(30 g_i)``; ``"sin_plus_gaussian"``
    gives ``sin(30 i) + g_i``.
    """
    g = as_rng(rng).standard_normal(k)
    if variant == "sin_of_gaussian":
        return np.sin(30.0 * g)
    if variant == "sin_plus_gaussian":
        return np.sin(30.0 * np.arange(k)) + g
    raise ValueError(f"unknown non-monotone variant {variant!r}")


def squared_difference_loss(h):
    h = np.asarray(h, dtype=float)
    return (h[:, None] - h[None, :]) ** 2


def mismatch_loss(k):
    return 1.0 - np.eye(k)


# --------------------------------------------------------------------------- query sources

class IndependentPairs:
    """Independently drawn logits ``l1, l2 ~ N(0, scale^2)`` per entry."""

    def __init__(self, k, scale=1.0):
        self.k, self.scale = k, scale

    def sample(self, n, rng):
        return (rng.normal(0.0, self.scale, (n, self.k)),
                rng.normal(0.0, self.scale, (n, self.k)))


class MirroredPairs:
    """``l1 ~ N(0, scale^2)`` and ``l2`` is ``l1`` reversed."""

    def __init__(self, k, scale=1.0):
        self.k, self.scale = k, scale

    def sample(self, n, rng):
        l1 = rng.normal(0.0, self.scale, (n, self.k))
        return l1, l1[:, ::-1].copy()


class PerturbedPair:
    """A fixed pair plus unit Gaussian noise scaled by ``rho`` (added in logit space).

    Entries that are ``-inf`` (zero probability) stay ``-inf``.
    """

    def __init__(self, l1, l2, rho=0.0):
        self.l1 = np.asarray(l1, dtype=float)
        self.l2 = np.asarray(l2, dtype=float)
        self.k, self.rho = len(self.l1), rho

    def sample(self, n, rng):
        if self.rho == 0:
            return np.tile(self.l1, (n, 1)), np.tile(self.l2, (n, 1))
        eta_p = rng.standard_normal((n, self.k))
        eta_q = rng.standard_normal((n, self.k))
        return self.l1 + self.rho * eta_p, self.l2 + self.rho * eta_q


class PairList:
    """Uniform draws from an explicit list of ``(l1, l2)`` pairs."""

    def __init__(self, pairs):
        self.l1 = np.array([a for a, _ in pairs], dtype=float)
        self.l2 = np.array([b for _, b in pairs], dtype=float)
        self.k = self.l1.shape[1]

    def sample(self, n, rng):
        idx = rng.integers(len(self.l1), size=n)
        return self.l1[idx], self.l2[idx]


@dataclass
class QuerySpec:
    """Distribution over logit pairs together with a joint loss table ``g[x, y]``."""

    pairs: object
    loss: np.ndarray

    @property
    def k(self):
        return self.pairs.k


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_pairs: int = 64
    noise_draws_per_pair: int = 16
    iterations: int = 5000
    temperature: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    check_every: int = 100

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_pairs < 1 or self.noise_draws_per_pair < 1 or self.iterations < 0:
            raise ValueError("counts must be positive")


# --------------------------------------------------------------------------- surrogate

def _kind_of(params):
    if isinstance(params, Gadget1Parameters):
        return "gadget1"
    if isinstance(params, Gadget2Parameters):
        return "gadget2"
    raise TypeError(f"not a gadget: {type(params).__name__}")


def sample_noise(params, n_pairs, n_draws, rng):
    """Exogenous noise for a batch: one entry per (pair, draw)."""
    rng = as_rng(rng)
    if _kind_of(params) == "gadget1":
        return {"gumbels": sample_gumbels((n_pairs, n_draws, params.k, params.k), rng)}
    return {"gumbels_z": sample_gumbels((n_pairs, n_draws, params.z), rng),
            "gumbels_x": sample_gumbels((n_pairs, n_draws, params.k), rng)}


def _relaxed_outcomes(params, l1, l2, noise, temperature):
    """Relaxed one-hot outcomes ``(B, S, K)`` for both sides of each pair."""
    if _kind_of(params) == "gadget1":
        g = noise["gumbels"]
        b = len(l1)
        k = params.k
        lj1 = ad.reshape(gadget1_log_joint(params.net_p, l1), (b, 1, k, k))
        lj2 = ad.reshape(gadget1_log_joint(params.net_q, l2), (b, 1, k, k))
        s1 = ad.max(g + lj1, axis=-1)
        s2 = ad.max(np.swapaxes(g, -1, -2) + lj2, axis=-1)
    else:
        b = len(l1)
        cond = gadget2_conditional(params, np.concatenate([l1, l2]))
        z_hat = gadget2_clusters(params, noise["gumbels_z"])[..., None]  # (B, S, 1)
        rows1 = ad.take_along_axis(ad.getitem(cond, slice(0, b)), z_hat, axis=1)
        rows2 = ad.take_along_axis(ad.getitem(cond, slice(b, 2 * b)), z_hat, axis=1)
        s1 = _safe_log(rows1) + noise["gumbels_x"]
        s2 = _safe_log(rows2) + noise["gumbels_x"]
    return ad.softmax(s1 / temperature), ad.softmax(s2 / temperature)


def _expected_loss(x_soft, y_soft, loss):
    loss = np.asarray(loss, dtype=float)
    if loss.ndim == 2:
        inner = ad.matmul(x_soft, loss)
    else:  # one table per pair, shape (B, K, K)
        inner = ad.sum(ad.reshape(x_soft, x_soft.shape + (1,)) * loss[:, None], axis=-2)
    return ad.mean(ad.sum(inner * y_soft, axis=-1))


def surrogate_loss(params, l1, l2, noise, loss, temperature=1.0):
    """Batch mean of ``sum_{x,y} f~(l1)_x f~(l2)_y g(x, y)`` with softmax-relaxed argmaxes.

    Gadget 1 keeps the max over the auxiliary index hard; Gadget 2 keeps the
    cluster draw hard (the cluster prior has no trainable parameters).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    x_soft, y_soft = _relaxed_outcomes(params, l1, l2, noise, temperature)
    return float(_expected_loss(x_soft, y_soft, loss))


def loss_and_gradient(params, l1, l2, noise, loss, temperature=1.0):
    """Surrogate loss and its exact reverse-mode gradient w.r.t. ``params.params()``."""
    leaves = [ad.Var(a) for a in params.params()]
    tracked = params.with_params(leaves)
    x_soft, y_soft = _relaxed_outcomes(tracked, l1, l2, noise, temperature)
    out = _expected_loss(x_soft, y_soft, loss)
    return float(ad.value(out)), ad.backward(out, leaves)


def gradient(params, l1, l2, noise, loss, temperature=1.0):
    return loss_and_gradient(params, l1, l2, noise, loss, temperature)[1]


def hard_loss(params, l1, l2, noise, loss):
    """Batch mean of ``g(x, y)`` for the unrelaxed outcomes on the same noise."""
    l1 = np.asarray(l1, dtype=float)[:, None]
    l2 = np.asarray(l2, dtype=float)[:, None]
    if _kind_of(params) == "gadget1":
        x, y = gadget1_sample_pair(params, l1, l2, noise["gumbels"])
    else:
        x, y = gadget2_sample_pair(params, l1, l2, noise["gumbels_z"], noise["gumbels_x"])
    loss = np.asarray(loss, dtype=float)
    if loss.ndim == 2:
        return float(loss[x, y].mean())
    return float(loss[np.arange(len(loss))[:, None], x, y].mean())


# --------------------------------------------------------------------------- adam

@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(state, params, grads, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns ``(new_state, new_params)``."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("parameter and gradient shapes differ")
    t = state.step + 1
    m = [beta1 * mi + (1 - beta1) * g for mi, g in zip(state.m, grads)]
    v = [beta2 * vi + (1 - beta2) * g * g for vi, g in zip(state.v, grads)]
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    new = [p - learning_rate * (mi / c1) / (np.sqrt(vi / c2) + eps)
           for p, mi, vi in zip(params, m, v)]
    return OptimizerState(m, v, t), new


# --------------------------------------------------------------------------- training

def marginal_error(params, logits):
    """Largest deviation of the gadget's analytic marginal from ``softmax(logits)``."""
    p = softmax(logits)
    if _kind_of(params) == "gadget1":
        return max(np.abs(gadget1_joint(params, side, logits).sum(axis=-1) - p).max()
                   for side in ("p", "q"))
    cond = gadget2_conditional(params, logits)
    return float(np.abs(np.einsum("z,...zk->...k", params.cluster_prior, cond) - p).max())


def train(params, query, config, log_every=0):
    """Minimize the surrogate loss with Adam; deterministic given ``config.seed``.

    Returns ``(trained_params, loss_history)`` where the history holds the
    surrogate loss of every iteration.
    """
    rng = np.random.default_rng(config.seed)
    flat = [np.array(p) for p in params.params()]
    state = OptimizerState.zeros_like(flat)
    history = []
    for it in range(config.iterations):
        l1, l2 = query.pairs.sample(config.batch_pairs, rng)
        noise = sample_noise(params, config.batch_pairs, config.noise_draws_per_pair, rng)
        value, grads = loss_and_gradient(params, l1, l2, noise, query.loss, config.temperature)
        if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDiverged(f"non-finite loss or gradient at iteration {it} (loss={value})")
        history.append(value)
        state, flat = adam_step(state, flat, grads, config.learning_rate,
                                config.beta1, config.beta2, config.eps)
        params = params.with_params(flat)
        if config.check_every and (it + 1) % config.check_every == 0:
            err = marginal_error(params, l1)
            if err > 1e-8:
                raise TrainingDiverged(f"marginal constraint drifted by {err:.3g} at iteration {it}")
        if log_every and (it + 1) % log_every == 0:
            log.info("iteration %d loss %.5f", it + 1, float(np.mean(history[-log_every:])))
    return params, history


def init_gadget(kind, k, z=5, hidden=(64, 64), rng=None, activation="tanh",
                sinkhorn_steps=10, out_scale=0.1, diag_bias=0.0):
    rng = as_rng(rng)
    if kind == "gadget1":
        return Gadget1Parameters.init(k, hidden, rng, activation, out_scale=out_scale,
                                      diag_bias=diag_bias)
    if kind == "gadget2":
        return Gadget2Parameters.init(k, z, hidden, rng, activation, sinkhorn_steps,
                                      out_scale=out_scale)
    raise ValueError(f"unknown gadget kind {kind!r}")


# --------------------------------------------------------------------------- evaluation

def evaluate_variance(sampler, pairs, h, n_samples, rng=None):
    """Per-pair sample variance of ``h(x) - h(y)``, averaged over pairs.

    ``sampler(l1, l2, n, rng)`` returns ``n`` coupled outcomes ``(x, y)``.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples per pair")
    rng = as_rng(rng)
    h = np.asarray(h, dtype=float)
    variances, means = [], []
    for l1, l2 in pairs:
        x, y = sampler(l1, l2, n_samples, rng)
        d = h[x] - h[y]
        variances.append(d.var(ddof=1))
        means.append(d.mean())
    variances = np.array(variances)
    se = variances.std(ddof=1) / np.sqrt(len(variances)) if len(variances) > 1 else 0.0
    return {"mean": float(np.mean(means)), "variance": float(variances.mean()),
            "std_error": float(se), "per_pair": variances}
