"""Learned and fixed causal coupling mechanisms for categorical outcomes."""
from .couplings import (CouplingMatrix, check_gumbel_max_suboptimal, coupling_metrics,
                        estimate_gumbel_max_coupling, gumbel_max_counterfactual_estimate,
                        gumbel_max_diagonal, independent_coupling, inverse_cdf_coupling,
                        maximal_coupling, mismatch_cost, optimal_transport_coupling,
                        variance_cost)
from .gadgets import Gadget1Parameters, Gadget2Parameters, load_params, save_params
from .gumbel import (gumbel_argmax, gumbel_softmax, sample_conditional_gumbels, sample_gumbels,
                     softmax)
from .mechanisms import make_mechanism
from .training import QuerySpec, TrainConfig, evaluate_variance, init_gadget, train
from .transport import transport_simplex

__version__ = "0.1.0"

__all__ = [
    "CouplingMatrix", "Gadget1Parameters", "Gadget2Parameters", "QuerySpec", "TrainConfig",
    "check_gumbel_max_suboptimal", "coupling_metrics", "estimate_gumbel_max_coupling",
    "evaluate_variance", "gumbel_argmax", "gumbel_max_counterfactual_estimate",
    "gumbel_max_diagonal", "gumbel_softmax", "independent_coupling", "init_gadget",
    "inverse_cdf_coupling", "load_params", "make_mechanism", "maximal_coupling",
    "mismatch_cost", "optimal_transport_coupling", "sample_conditional_gumbels",
    "sample_gumbels", "save_params", "softmax", "train", "transport_simplex", "variance_cost",
]
