"""Trainable implicit-coupling mechanisms (Gadget 1 and Gadget 2).

Both gadgets map logits to an auxiliary joint or conditional whose marginal is
exactly ``softmax(l)``, then apply Gumbel-max with noise shared between the
two sides of a query.  The model math is written against :mod:`autodiff`, so
the same functions serve sampling (plain arrays) and training (``Var`` weights).

Shapes: logits are ``(..., K)``; Gadget 1 joints are ``(..., K, K)`` indexed
``[x, z]``; Gadget 2 proposals and conditionals are ``(..., Z, K)`` indexed
``[z, x]``.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .gumbel import as_rng, log_softmax, sample_conditional_gumbels, sample_gumbels, truncated_topdown

CHECKPOINT_VERSION = 1
INPUT_FLOOR = -30.0  # network inputs for zero-probability outcomes
SAFE_LOG_FLOOR = 1e-300
POSITIVITY_EPS = 1e-6

ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu, "silu": ad.silu, "softplus": ad.softplus}


@dataclass
class FeedForwardNet:
    """Multilayer perceptron; ``layers`` is a list of ``(weight, bias)`` pairs."""

    layers: list
    activation: str = "tanh"

    def __post_init__(self):
        for (w, b), (w_next, _) in zip(self.layers[:-1], self.layers[1:]):
            if w.shape[1] != w_next.shape[0] or b.shape != (w.shape[1],):
                raise ValueError("layer dimensions do not compose")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(cls, sizes, rng=None, activation="tanh", out_scale=1.0):
        """Fan-in scaled Gaussian weights, zero biases; last layer scaled by ``out_scale``."""
        rng = as_rng(rng)
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))
            if i == len(sizes) - 2:
                w = w * out_scale
            layers.append((w, np.zeros(n_out)))
        return cls(layers, activation)

    @property
    def sizes(self):
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    def params(self):
        return [a for layer in self.layers for a in layer]

    def with_params(self, flat):
        it = iter(flat)
        return FeedForwardNet([(next(it), next(it)) for _ in self.layers], self.activation)

    def __call__(self, x):
        act = ACTIVATIONS[self.activation]
        for i, (w, b) in enumerate(self.layers):
            x = ad.matmul(x, w) + b
            if i < len(self.layers) - 1:
                x = act(x)
        return x


def _net_input(logits):
    return np.maximum(log_softmax(logits), INPUT_FLOOR)


def _safe_log(x):
    return ad.log(ad.clip_min(x, SAFE_LOG_FLOOR))


# --------------------------------------------------------------------------- gadget 1

@dataclass
class Gadget1Parameters:
    net_p: FeedForwardNet
    net_q: FeedForwardNet
    k: int
    tied: bool = False

    @classmethod
    def init(cls, k, hidden=(64, 64), rng=None, activation="tanh", tied=False,
             out_scale=1.0, diag_bias=0.0):
        """Random nets; ``diag_bias`` adds ``bias`` to the ``z == x`` output logits."""
        rng = as_rng(rng)
        sizes = [k, *hidden, k * k]

        def make():
            net = FeedForwardNet.init(sizes, rng, activation, out_scale)
            w, b = net.layers[-1]
            net.layers[-1] = (w, b + diag_bias * np.eye(k).ravel())
            return net

        net_p = make()
        net_q = net_p if tied else make()
        return cls(net_p, net_q, k, tied)

    @classmethod
    def diagonal(cls, k, hidden=(8,), bias=50.0, activation="tanh", tied=True):
        """Zero weights and a large diagonal bias: ``pi(x, z) = p(x) 1[z = x]`` (Gumbel-max)."""
        sizes = [k, *hidden, k * k]
        layers = [(np.zeros((a, b)), np.zeros(b)) for a, b in zip(sizes[:-1], sizes[1:])]
        layers[-1] = (layers[-1][0], bias * np.eye(k).ravel())
        net = FeedForwardNet(layers, activation)
        return cls(net, net if tied else FeedForwardNet(list(layers), activation), k, tied)

    def params(self):
        return self.net_p.params() if self.tied else self.net_p.params() + self.net_q.params()

    def with_params(self, flat):
        n = len(self.net_p.params())
        net_p = self.net_p.with_params(flat[:n])
        net_q = net_p if self.tied else self.net_q.with_params(flat[n:])
        return Gadget1Parameters(net_p, net_q, self.k, self.tied)


def gadget1_log_joint(net, logits):
    """``log pi(x, z | l) = log_softmax(l)_x + log_softmax_z(net(l))[x, z]``."""
    logits = np.asarray(logits, dtype=float)
    k = logits.shape[-1]
    out = net(_net_input(logits))
    out = ad.reshape(out, logits.shape[:-1] + (k, k))
    return ad.log_softmax(out, axis=-1) + log_softmax(logits)[..., :, None]


def gadget1_joint(params, side, logits):
    """Auxiliary joint ``pi(x, z | l)`` for the ``"p"`` or ``"q"`` side; rows sum to ``softmax(l)``."""
    if side not in ("p", "q"):
        raise ValueError("side must be 'p' or 'q'")
    net = params.net_p if side == "p" else params.net_q
    return np.exp(ad.value(gadget1_log_joint(net, logits)))


def _gadget1_scores(log_joint, gumbels, transpose):
    """Row maxima ``max_z (gamma[x, z] + log pi[x, z])`` with optional transposed noise."""
    g = np.swapaxes(gumbels, -1, -2) if transpose else gumbels
    return ad.max(g + log_joint, axis=-1)


def gadget1_sample_pair(params, l1, l2, gumbels):
    """Shared-noise outcomes ``(x, y)``; the ``q`` side reads the transposed Gumbel matrix.

    ``gumbels`` has shape ``(..., K, K)``; the leading axes are sample axes and
    must broadcast against the logit batch axes.
    """
    lj1 = gadget1_log_joint(params.net_p, l1)
    lj2 = gadget1_log_joint(params.net_q, l2)
    x = np.argmax(_gadget1_scores(lj1, gumbels, False), axis=-1)
    y = np.argmax(_gadget1_scores(lj2, gumbels, True), axis=-1)
    return x, y


def gadget1_posterior_gumbels(params, l1, x_obs, rng=None):
    """Posterior ``K x K`` Gumbel matrices given that the p-side forward returns ``x_obs``.

    Row maxima are drawn top-down from Gumbel(log p(x)) given the observed argmax,
    row argmaxes independently from ``pi(z | x)``, and each row is completed by
    top-down sampling with its maximum and argmax fixed.
    """
    rng = as_rng(rng)
    l1 = np.asarray(l1, dtype=float)
    x_obs = np.atleast_1d(np.asarray(x_obs, dtype=np.intp))
    n, k = len(x_obs), l1.shape[-1]
    log_joint = np.broadcast_to(ad.value(gadget1_log_joint(params.net_p, l1)), (n, k, k))
    log_p = np.broadcast_to(log_softmax(l1), (n, k))

    row_noise = sample_conditional_gumbels(log_p, x_obs, rng)
    with np.errstate(invalid="ignore"):
        row_max = log_p + row_noise
    with np.errstate(invalid="ignore"):
        cond = np.exp(log_joint - log_p[..., None])
    cond = np.where(np.isfinite(log_p)[..., None], cond, 1.0 / k)
    u = rng.random((n, k, 1))
    z_star = np.minimum((u > np.cumsum(cond, axis=-1)).sum(axis=-1), k - 1)

    live = np.isfinite(row_max)
    top = np.where(live, row_max, 0.0)
    rows = np.where(live[..., None], log_joint, 0.0)
    gamma = truncated_topdown(rows, z_star, top, rng)
    gamma = np.where(live[..., None], gamma, sample_gumbels((n, k, k), rng))

    # float rounding can reorder nearly tied row maxima; nudge offending rows down
    while True:
        scores = ad.value(_gadget1_scores(log_joint, gamma, False))
        x_hat = np.argmax(scores, axis=-1)
        bad = x_hat != x_obs
        if not bad.any():
            return gamma
        top_obs = np.take_along_axis(scores, x_obs[:, None], axis=-1)
        offending = bad[:, None] & (scores >= top_obs)
        offending[np.arange(n), x_obs] = False
        step = np.spacing(np.abs(top_obs))[..., None] * 4
        gamma = np.where(offending[..., None], gamma - step, gamma)


def gadget1_counterfactual(params, l1, l2, x_obs, rng=None):
    """Counterfactual ``y`` under ``l2`` given observed ``x_obs`` under ``l1``."""
    gamma = gadget1_posterior_gumbels(params, l1, x_obs, rng)
    lj2 = gadget1_log_joint(params.net_q, l2)
    return np.argmax(_gadget1_scores(lj2, gamma, True), axis=-1)


# --------------------------------------------------------------------------- gadget 2

@dataclass
class Gadget2Parameters:
    net: FeedForwardNet
    k: int
    z: int
    cluster_prior: np.ndarray = field(default=None)
    sinkhorn_steps: int = 10

    def __post_init__(self):
        if self.z < 1:
            raise ValueError("need at least one cluster")
        if self.cluster_prior is None:
            self.cluster_prior = np.full(self.z, 1.0 / self.z)
        self.cluster_prior = np.asarray(self.cluster_prior, dtype=float)
        if self.cluster_prior.shape != (self.z,) or np.any(self.cluster_prior <= 0) \
                or abs(self.cluster_prior.sum() - 1) > 1e-12:
            raise ValueError("cluster prior must be a strictly positive simplex vector")

    @classmethod
    def init(cls, k, z=5, hidden=(64, 64), rng=None, activation="tanh",
             sinkhorn_steps=10, out_scale=1.0):
        net = FeedForwardNet.init([k, *hidden, z * k], as_rng(rng), activation, out_scale)
        return cls(net, k, z, None, sinkhorn_steps)

    def params(self):
        return self.net.params()

    def with_params(self, flat):
        return Gadget2Parameters(self.net.with_params(flat), self.k, self.z,
                                 self.cluster_prior, self.sinkhorn_steps)


def sinkhorn_normalize(a0, p, prior, steps):
    """Alternate outcome and cluster rescaling of a positive ``(..., Z, K)`` matrix.

    Each step scales every outcome column to total ``p(x)`` and then every
    cluster row to total ``prior(z)``; ending on the cluster step makes the
    cluster sums exact.
    """
    if steps < 1:
        raise ValueError("need at least one Sinkhorn step")
    if np.any(ad.value(a0) <= 0):
        raise ValueError("Sinkhorn input must be strictly positive")
    p = np.asarray(p, dtype=float)[..., None, :]
    prior = np.asarray(prior, dtype=float)[:, None]
    a = a0
    for _ in range(steps):
        a = a * (p / ad.clip_min(ad.sum(a, axis=-2, keepdims=True), SAFE_LOG_FLOOR))
        a = a * (prior / ad.sum(a, axis=-1, keepdims=True))
    return a


def accept_reject_correct(a, p, prior, check=True):
    """Cluster conditionals ``pi(x | z, p)`` from a cluster-normalized proposal ``a[z, x]``.

    Accepts the proposal with probability ``c_x / c*`` and otherwise falls back to
    an independent draw from ``p``; the mixture over clusters is exactly ``p``.
    """
    p = np.asarray(p, dtype=float)
    prior = np.asarray(prior, dtype=float)
    if check:
        err = np.abs(ad.value(a).sum(axis=-1) - prior).max()
        if err > 1e-9:
            raise ValueError(f"proposal cluster sums differ from the prior by {err:.3g}")
    pz = prior[:, None]
    col = ad.clip_min(ad.sum(a, axis=-2, keepdims=True), SAFE_LOG_FLOOR)
    c = p[..., None, :] / col                              # (..., 1, K)
    c_star = ad.max(c, axis=-1, keepdims=True)             # (..., 1, 1)
    ratio = a / pz
    d = ad.sum(ratio * c, axis=-1, keepdims=True)          # (..., Z, 1)
    return (c / c_star) * ratio + (1.0 - d / c_star) * p[..., None, :]


def gadget2_conditional(params, logits):
    """``pi(x | z, l)`` as a ``(..., Z, K)`` array (or ``Var`` when weights are tracked)."""
    logits = np.asarray(logits, dtype=float)
    k, z = params.k, params.z
    out = params.net(_net_input(logits))
    a0 = ad.reshape(ad.softplus(out), logits.shape[:-1] + (z, k)) + POSITIVITY_EPS
    p = np.exp(log_softmax(logits))
    a = sinkhorn_normalize(a0, p, params.cluster_prior, params.sinkhorn_steps)
    return accept_reject_correct(a, p, params.cluster_prior, check=False)


def gadget2_clusters(params, gumbels_z):
    return np.argmax(np.log(params.cluster_prior) + gumbels_z, axis=-1)


def gadget2_sample_pair(params, l1, l2, gumbels_z, gumbels_x):
    """Outcomes ``(x, y)`` sharing the cluster draw and the outcome-level noise.

    ``gumbels_z`` is ``(..., Z)`` and ``gumbels_x`` is ``(..., K)`` with matching
    leading sample axes that broadcast against the logit batch axes.
    """
    z_hat = gadget2_clusters(params, gumbels_z)
    c1 = ad.value(gadget2_conditional(params, l1))
    c2 = ad.value(gadget2_conditional(params, l2))
    shape = np.broadcast_shapes(z_hat.shape, c1.shape[:-2])
    z_idx = np.broadcast_to(z_hat, shape)[..., None, None]
    row1 = np.take_along_axis(np.broadcast_to(c1, shape + c1.shape[-2:]), z_idx, axis=-2)[..., 0, :]
    row2 = np.take_along_axis(np.broadcast_to(c2, shape + c2.shape[-2:]), z_idx, axis=-2)[..., 0, :]
    with np.errstate(divide="ignore"):
        x = np.argmax(np.log(row1) + gumbels_x, axis=-1)
        y = np.argmax(np.log(row2) + gumbels_x, axis=-1)
    return x, y


def gadget2_posterior_noise(params, l1, x_obs, rng=None):
    """Cluster and outcome noise ``(z, gumbels_x)`` given the p-side returned ``x_obs``.

    The cluster comes from ``pi(z | x_obs) ~ prior(z) pi(x_obs | z, l1)``; the
    outcome Gumbels are then drawn top-down given the observed argmax.
    """
    rng = as_rng(rng)
    x_obs = np.atleast_1d(np.asarray(x_obs, dtype=np.intp))
    c1 = ad.value(gadget2_conditional(params, l1))
    if c1.ndim != 2:
        raise ValueError("counterfactual sampling takes a single logit pair")
    post = params.cluster_prior[None, :] * c1[:, x_obs].T         # (n, Z)
    totals = post.sum(axis=1, keepdims=True)
    if np.any(totals <= 0):
        raise ValueError("observed outcome is impossible under l1")
    u = rng.random((len(x_obs), 1))
    z = np.minimum((u > np.cumsum(post / totals, axis=1)).sum(axis=1), params.z - 1)
    with np.errstate(divide="ignore"):
        log_c1 = np.log(c1[z])
    return z, sample_conditional_gumbels(log_c1, x_obs, rng)


def gadget2_counterfactual(params, l1, l2, x_obs, rng=None):
    """Counterfactual ``y`` under ``l2`` for each observed ``x_obs`` under ``l1``."""
    z, gamma = gadget2_posterior_noise(params, l1, x_obs, rng)
    c2 = ad.value(gadget2_conditional(params, l2))
    with np.errstate(divide="ignore"):
        return np.argmax(np.log(c2[z]) + gamma, axis=-1)


# --------------------------------------------------------------------------- checkpoints

def _net_to_dict(net):
    return {"activation": net.activation,
            "layers": [{"weight_shape": list(w.shape), "weight": w.ravel().tolist(),
                        "bias": b.tolist()} for w, b in net.layers]}


def _net_from_dict(d):
    layers = [(np.array(l["weight"], dtype=float).reshape(l["weight_shape"]),
               np.array(l["bias"], dtype=float)) for l in d["layers"]]
    return FeedForwardNet(layers, d["activation"])


def save_params(params, path):
    """JSON checkpoint: version tag, gadget kind, layer shapes and row-major weights."""
    if isinstance(params, Gadget1Parameters):
        doc = {"kind": "gadget1", "k": params.k, "tied": params.tied,
               "net_p": _net_to_dict(params.net_p),
               "net_q": None if params.tied else _net_to_dict(params.net_q)}
    elif isinstance(params, Gadget2Parameters):
        doc = {"kind": "gadget2", "k": params.k, "z": params.z,
               "cluster_prior": params.cluster_prior.tolist(),
               "sinkhorn_steps": params.sinkhorn_steps, "net": _net_to_dict(params.net)}
    else:
        raise TypeError(f"cannot checkpoint {type(params).__name__}")
    doc["version"] = CHECKPOINT_VERSION
    Path(path).write_text(json.dumps(doc))
    return Path(path)


def load_params(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    if doc["kind"] == "gadget1":
        net_p = _net_from_dict(doc["net_p"])
        net_q = net_p if doc["tied"] else _net_from_dict(doc["net_q"])
        return Gadget1Parameters(net_p, net_q, doc["k"], doc["tied"])
    if doc["kind"] == "gadget2":
        return Gadget2Parameters(_net_from_dict(doc["net"]), doc["k"], doc["z"],
                                 np.array(doc["cluster_prior"]), doc["sinkhorn_steps"])
    raise ValueError(f"unknown gadget kind {doc['kind']!r}")
