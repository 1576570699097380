"""Gumbel noise primitives: sampling, Gumbel-max, relaxation and top-down posteriors.

All functions operate on the last axis of their array arguments, so batches of
logit vectors can be processed in one call.  Logits may contain ``-inf`` for
zero-probability outcomes.
"""
import numpy as np

_TINY = np.nextafter(0.0, 1.0)


def as_rng(rng):
    """Coerce a seed or ``None`` into a Generator; other objects are used as given.

    Anything exposing the Generator methods a caller needs (for example a stub
    replaying fixed draws) passes through unchanged.
    """
    if rng is None or isinstance(rng, (int, np.integer, list, tuple, np.random.SeedSequence)):
        return np.random.default_rng(rng)
    return rng


def sample_gumbels(n, rng=None):
    """Draw standard Gumbel(0) noise of shape ``n`` as ``-log(-log(u))``."""
    rng = as_rng(rng)
    if np.ndim(n) == 0 and int(n) < 1:
        raise ValueError("n must be >= 1")
    u = rng.random(n)
    # rng.random is on [0, 1); keep u strictly inside (0, 1)
    u = np.maximum(u, _TINY)
    return -np.log(-np.log(u))


def gumbel_argmax(logits, gumbels):
    """Index of the max of ``logits + gumbels``; ties go to the lowest index."""
    logits = np.asarray(logits, dtype=float)
    gumbels = np.asarray(gumbels, dtype=float)
    if logits.shape[-1] != gumbels.shape[-1]:
        raise ValueError(
            f"length mismatch: logits {logits.shape[-1]} vs gumbels {gumbels.shape[-1]}")
    return np.argmax(logits + gumbels, axis=-1)


def softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=float)
    m = np.max(logits, axis=axis, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=float)
    m = np.max(logits, axis=axis, keepdims=True)
    return logits - (m + np.log(np.exp(logits - m).sum(axis=axis, keepdims=True)))


def logsumexp(logits, axis=-1):
    logits = np.asarray(logits, dtype=float)
    m = np.max(logits, axis=axis, keepdims=True)
    out = m + np.log(np.exp(logits - m).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def gumbel_softmax(logits, gumbels, temperature):
    """Relaxed one-hot sample ``softmax((logits + gumbels) / temperature)``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return softmax((np.asarray(logits, float) + gumbels) / temperature)


def truncated_topdown(logits, observed, top, rng=None):
    """Gumbel noise whose perturbed maximum is ``top``, attained at ``observed``.

    ``logits`` has shape ``(..., K)``; ``observed`` and ``top`` broadcast against
    the batch shape ``(...)``.  Non-observed perturbed values are Gumbel(l_j)
    truncated above at ``top``; entries with ``-inf`` logits are unconstrained.
    Returns raw noise ``gamma`` (so the perturbed values are ``logits + gamma``).
    """
    rng = as_rng(rng)
    logits = np.asarray(logits, dtype=float)
    batch = logits.shape[:-1]
    observed = np.broadcast_to(np.asarray(observed, dtype=np.intp), batch)
    top = np.broadcast_to(np.asarray(top, dtype=float), batch)
    k = logits.shape[-1]
    if np.any((observed < 0) | (observed >= k)):
        raise IndexError("observed outcome out of range")
    obs_logit = np.take_along_axis(logits, observed[..., None], axis=-1)[..., 0]
    if not np.all(np.isfinite(obs_logit)):
        raise ValueError("observed outcome has zero probability")

    g = sample_gumbels(logits.shape, rng)
    finite = np.isfinite(logits)
    with np.errstate(invalid="ignore"):
        shifted = logits + g
        # -log(exp(-G) + exp(-M)) via a stable two-argument log-add
        trunc = -np.logaddexp(-shifted, -top[..., None])
    shifted = np.where(finite, trunc, -np.inf)
    np.put_along_axis(shifted, observed[..., None], top[..., None], axis=-1)
    with np.errstate(invalid="ignore"):
        gamma = np.where(finite, shifted - np.where(finite, logits, 0.0), g)
    # rounding in (logits + gamma) can create ties with the top; break them downward
    perturbed = np.where(finite, logits + gamma, -np.inf)
    top_actual = np.take_along_axis(perturbed, observed[..., None], axis=-1)
    mask = np.ones(logits.shape, dtype=bool)
    np.put_along_axis(mask, observed[..., None], False, axis=-1)
    bad = mask & finite & (perturbed >= top_actual)
    while bad.any():
        with np.errstate(invalid="ignore"):
            below = np.nextafter(top_actual, -np.inf) - np.spacing(np.abs(top_actual)) - logits
        gamma = np.where(bad, np.minimum(np.nextafter(gamma, -np.inf), below), gamma)
        perturbed = np.where(finite, logits + gamma, -np.inf)
        bad = mask & finite & (perturbed >= top_actual)
    return gamma


def sample_conditional_gumbels(logits, observed, rng=None, size=None):
    """Posterior sample of Gumbel(0) noise given ``gumbel_argmax(logits, .) == observed``.

    The perturbed maximum is drawn from Gumbel(logsumexp(logits)) and the
    remaining coordinates from truncated Gumbels (top-down sampling).
    ``size`` prepends independent draws; ``logits``/``observed`` may be batched.
    """
    rng = as_rng(rng)
    logits = np.asarray(logits, dtype=float)
    if size is not None:
        size = (size,) if np.ndim(size) == 0 else tuple(size)
        logits = np.broadcast_to(logits, size + logits.shape)
    batch = logits.shape[:-1]
    top = logsumexp(logits) + sample_gumbels(batch if batch else (), rng)
    return truncated_topdown(logits, observed, top, rng)
