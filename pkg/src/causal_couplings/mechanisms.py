"""Uniform sampling interface over fixed and learned coupling mechanisms.

Every mechanism offers ``sample_pairs(l1, l2, n, rng)`` (joint sampling with
shared noise) and ``counterfactual(l1, l2, x_obs, rng)`` (condition on the
observed outcome under ``l1``, then sample the outcome under ``l2``).
Explicit-joint mechanisms answer counterfactuals from the row conditional
``joint[x_obs, :] / p(x_obs)``.
"""
import numpy as np

from .couplings import (independent_coupling, inverse_cdf_coupling, maximal_coupling,
                        optimal_transport_coupling, variance_cost)
from .gadgets import (Gadget1Parameters, gadget1_counterfactual, gadget1_sample_pair,
                      gadget2_counterfactual, gadget2_sample_pair)
from .gumbel import as_rng, gumbel_argmax, sample_conditional_gumbels, sample_gumbels, softmax

MECHANISMS = ("independent", "gumbel_max", "inverse_cdf", "optimal_lp", "maximal",
              "gadget1", "gadget2")


class ExplicitMechanism:
    def __init__(self, name, build):
        self.name = name
        self.build = build

    def coupling(self, l1, l2):
        return self.build(softmax(l1), softmax(l2))

    def sample_pairs(self, l1, l2, n, rng=None):
        return self.coupling(l1, l2).sample(n, as_rng(rng))

    def counterfactual(self, l1, l2, x_obs, rng=None):
        return self.coupling(l1, l2).sample_counterfactual(x_obs, as_rng(rng))


class GumbelMaxMechanism:
    name = "gumbel_max"

    def sample_pairs(self, l1, l2, n, rng=None):
        g = sample_gumbels((n, len(l1)), as_rng(rng))
        return gumbel_argmax(l1, g), gumbel_argmax(l2, g)

    def counterfactual(self, l1, l2, x_obs, rng=None):
        x_obs = np.atleast_1d(x_obs)
        g = sample_conditional_gumbels(np.broadcast_to(l1, (len(x_obs), len(l1))), x_obs,
                                       as_rng(rng))
        return gumbel_argmax(l2, g)


class GadgetMechanism:
    def __init__(self, params, name=None):
        self.params = params
        self.is_g1 = isinstance(params, Gadget1Parameters)
        self.name = name or ("gadget1" if self.is_g1 else "gadget2")

    def sample_pairs(self, l1, l2, n, rng=None):
        rng = as_rng(rng)
        k = self.params.k
        if self.is_g1:
            return gadget1_sample_pair(self.params, l1, l2, sample_gumbels((n, k, k), rng))
        return gadget2_sample_pair(self.params, l1, l2, sample_gumbels((n, self.params.z), rng),
                                   sample_gumbels((n, k), rng))

    def counterfactual(self, l1, l2, x_obs, rng=None):
        if self.is_g1:
            return gadget1_counterfactual(self.params, l1, l2, x_obs, rng)
        return gadget2_counterfactual(self.params, l1, l2, x_obs, rng)


def make_mechanism(name, params=None, h=None, cost=None):
    """Build a named mechanism.

    ``optimal_lp`` needs either a cost matrix or scores ``h`` (cost ``(h(x)-h(y))^2``);
    the gadget mechanisms need trained ``params``.
    """
    if name == "independent":
        return ExplicitMechanism(name, independent_coupling)
    if name == "inverse_cdf":
        return ExplicitMechanism(name, inverse_cdf_coupling)
    if name == "maximal":
        return ExplicitMechanism(name, maximal_coupling)
    if name == "optimal_lp":
        if cost is None:
            if h is None:
                raise ValueError("optimal_lp needs a cost matrix or scores h")
            cost = variance_cost(h)
        return ExplicitMechanism(name, lambda p, q: optimal_transport_coupling(p, q, cost))
    if name == "gumbel_max":
        return GumbelMaxMechanism()
    if name in ("gadget1", "gadget2"):
        if params is None:
            raise ValueError(f"{name} needs trained parameters")
        return GadgetMechanism(params, name)
    raise ValueError(f"unknown mechanism {name!r}")
