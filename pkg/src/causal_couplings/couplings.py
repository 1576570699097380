"""Explicit couplings between two categorical distributions.

Constructors return :class:`CouplingMatrix` objects; ``coupling_metrics``
evaluates the treatment-effect statistics of ``h1(x) - h2(y)`` exactly.  The
Gumbel-max helpers give closed forms (diagonal, suboptimality test) next to
Monte Carlo estimators that share Gumbel noise between two logit vectors.
"""
import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gumbel import (as_rng, gumbel_argmax, sample_conditional_gumbels,
                     sample_gumbels, softmax)
from .transport import transport_simplex

MARGINAL_TOL = 1e-9


def _check_pair(p, q):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.ndim != 1 or p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    for name, d in (("p", p), ("q", q)):
        if np.any(d < 0) or abs(d.sum() - 1.0) > MARGINAL_TOL:
            raise ValueError(f"{name} is not a probability vector")
    return p, q


def _check_positive(p, q):
    p, q = _check_pair(p, q)
    if np.any(p <= 0) or np.any(q <= 0):
        raise ValueError("closed form requires strictly positive probabilities")
    return p, q


@dataclass
class CouplingMatrix:
    """Joint distribution ``joint[x, y]`` with row marginal ``p`` and column marginal ``q``."""

    joint: np.ndarray
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.joint = np.asarray(self.joint, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        self.q = np.asarray(self.q, dtype=float)

    @property
    def k(self):
        return len(self.p)

    def marginal_error(self):
        return max(np.abs(self.joint.sum(axis=1) - self.p).max(),
                   np.abs(self.joint.sum(axis=0) - self.q).max(),
                   abs(self.joint.sum() - 1.0))

    def validate(self, tol=MARGINAL_TOL):
        if self.joint.shape != (len(self.p), len(self.q)):
            raise ValueError("joint shape does not match marginals")
        if np.any(self.joint < -tol):
            raise ValueError("negative joint probability")
        err = self.marginal_error()
        if err > tol:
            raise ValueError(f"marginal constraint violated by {err:.3g}")
        return self

    def p_equal(self):
        return float(np.trace(self.joint))

    def conditional(self, x):
        """Distribution of ``y`` given row outcome ``x``."""
        row = self.joint[x]
        total = row.sum()
        if total <= 0:
            raise ValueError(f"outcome {x} has zero probability under the coupling")
        return row / total

    def sample(self, n, rng=None):
        rng = as_rng(rng)
        flat = np.clip(self.joint.ravel(), 0, None)
        idx = rng.choice(flat.size, size=n, p=flat / flat.sum())
        return np.divmod(idx, self.joint.shape[1])

    def sample_counterfactual(self, x_obs, rng=None):
        """Draw ``y ~ joint[x_obs, :] / p(x_obs)`` for each entry of ``x_obs``."""
        rng = as_rng(rng)
        x_obs = np.atleast_1d(np.asarray(x_obs, dtype=np.intp))
        cond = np.clip(self.joint[x_obs], 0, None)
        sums = cond.sum(axis=1, keepdims=True)
        if np.any(sums <= 0):
            raise ValueError("observed outcome has zero probability under the coupling")
        cdf = np.cumsum(cond / sums, axis=1)
        u = rng.random(len(x_obs))[:, None]
        return np.minimum((u > cdf).sum(axis=1), self.joint.shape[1] - 1)

    def to_csv(self, path):
        """Write ``x,y,prob`` rows plus a ``<path>.json`` sidecar with the marginals."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "prob"])
            for x in range(self.joint.shape[0]):
                for y in range(self.joint.shape[1]):
                    writer.writerow([x, y, repr(float(self.joint[x, y]))])
        sidecar = path.with_suffix(path.suffix + ".json")
        sidecar.write_text(json.dumps({"p": self.p.tolist(), "q": self.q.tolist()}, indent=2))
        return path

    @classmethod
    def from_csv(cls, path):
        path = Path(path)
        sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        p, q = np.array(sidecar["p"]), np.array(sidecar["q"])
        joint = np.zeros((len(p), len(q)))
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["x", "y", "prob"]:
                raise ValueError(f"unexpected header {reader.fieldnames}")
            for row in reader:
                joint[int(row["x"]), int(row["y"])] = float(row["prob"])
        return cls(joint, p, q)


def independent_coupling(p, q):
    p, q = _check_pair(p, q)
    return CouplingMatrix(np.outer(p, q), p, q)


def inverse_cdf_coupling(p, q):
    """Joint law of ``(F_p^{-1}(U), F_q^{-1}(U))`` computed by sweeping [0, 1]."""
    p, q = _check_pair(p, q)
    k = len(p)
    joint = np.zeros((k, k))
    i = j = 0
    rem_p, rem_q = p[0], q[0]
    while i < k and j < k:
        t = min(rem_p, rem_q)
        joint[i, j] += t
        rem_p -= t
        rem_q -= t
        if rem_p <= rem_q:
            i += 1
            if i < k:
                rem_p = p[i]
        else:
            j += 1
            if j < k:
                rem_q = q[j]
    return CouplingMatrix(joint, p, q)


def maximal_coupling(p, q):
    """Diagonal ``min(p, q)``; residual mass spread as an outer product of residuals."""
    p, q = _check_pair(p, q)
    overlap = np.minimum(p, q)
    joint = np.diag(overlap)
    rp, rq = p - overlap, q - overlap
    tv = rp.sum()
    if tv > 0:
        joint = joint + np.outer(rp, rq) / tv
    return CouplingMatrix(joint, p, q)


def optimal_transport_coupling(p, q, cost):
    """Coupling minimizing ``sum(joint * cost)`` (exact transportation simplex)."""
    p, q = _check_pair(p, q)
    plan, _ = transport_simplex(p, q, cost)
    return CouplingMatrix(plan, p, q)


def variance_cost(h1, h2=None):
    h1 = np.asarray(h1, dtype=float)
    h2 = h1 if h2 is None else np.asarray(h2, dtype=float)
    return (h1[:, None] - h2[None, :]) ** 2


def mismatch_cost(k):
    return 1.0 - np.eye(k)


def gumbel_max_diagonal(p, q):
    """Closed-form ``P(x = y = i)`` under the Gumbel-max coupling, for every ``i``."""
    p, q = _check_positive(p, q)
    ratios = np.maximum(p[None, :] / p[:, None], q[None, :] / q[:, None])
    np.fill_diagonal(ratios, 0.0)
    return 1.0 / (1.0 + ratios.sum(axis=1))


def check_gumbel_max_suboptimal(p, q):
    """True iff the Gumbel-max coupling is not maximal for ``(p, q)``."""
    p, q = _check_positive(p, q)
    rp = p[None, :] / p[:, None]
    rq = q[None, :] / q[:, None]
    np.fill_diagonal(rp, 0.0)
    np.fill_diagonal(rq, 0.0)
    lhs = np.maximum(rp.sum(axis=1), rq.sum(axis=1))
    rhs = np.maximum(rp, rq).sum(axis=1)
    return bool(np.any(lhs < rhs))


def estimate_gumbel_max_coupling(l1, l2, n_samples, rng=None, chunk=200_000):
    """Monte Carlo Gumbel-max coupling: tally argmaxes under shared noise.

    Marginals only hold within Monte Carlo error.
    """
    rng = as_rng(rng)
    l1 = np.asarray(l1, dtype=float)
    l2 = np.asarray(l2, dtype=float)
    k = len(l1)
    counts = np.zeros(k * k, dtype=np.int64)
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        g = sample_gumbels((n, k), rng)
        x = gumbel_argmax(l1, g)
        y = gumbel_argmax(l2, g)
        counts += np.bincount(x * k + y, minlength=k * k)
        done += n
    joint = counts.reshape(k, k) / n_samples
    return CouplingMatrix(joint, softmax(l1), softmax(l2))


def coupling_metrics(coupling, h1, h2=None):
    """Exact mean and variance of ``h1(x) - h2(y)`` and ``P(x != y)`` under the coupling."""
    h1 = np.asarray(h1, dtype=float)
    h2 = h1 if h2 is None else np.asarray(h2, dtype=float)
    joint = coupling.joint
    if joint.shape != (len(h1), len(h2)):
        raise ValueError("score dimensions do not match the coupling")
    diff = h1[:, None] - h2[None, :]
    mean = float(np.sum(joint * diff))
    var = float(np.sum(joint * (diff - mean) ** 2))
    return {"mean_diff": mean, "var_diff": var,
            "p_mismatch": float(joint.sum() - np.trace(joint))}


def gumbel_max_counterfactual_estimate(l1, l2, h1, h2, n_outer, rng=None):
    """Estimate ``E_p[h1] - E_q[h2]`` by conditioning Gumbel noise on ``y ~ q``.

    Each draw evaluates ``h1(argmax(l1 + g)) - h2(y)`` with ``g`` sampled from the
    posterior given ``argmax(l2 + g) = y``.
    """
    if n_outer < 1:
        raise ValueError("n_outer must be >= 1")
    rng = as_rng(rng)
    l1 = np.asarray(l1, dtype=float)
    l2 = np.asarray(l2, dtype=float)
    h1 = np.asarray(h1, dtype=float)
    h2 = np.asarray(h2, dtype=float)
    q = softmax(l2)
    y = rng.choice(len(q), size=n_outer, p=q)
    g = sample_conditional_gumbels(np.broadcast_to(l2, (n_outer, len(l2))), y, rng)
    x = gumbel_argmax(l1, g)
    d = h1[x] - h2[gumbel_argmax(l2, g)]
    se = float(d.std(ddof=1) / np.sqrt(n_outer)) if n_outer > 1 else float("nan")
    return {"estimate": float(d.mean()), "std_error": se, "samples": d}
