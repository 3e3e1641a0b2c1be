"""Discrete optimal transport between visual and text token sets."""

from otat.transport.cost import CostKind, CostMatrix, build_cost, pairwise_costs, pairwise_costs_backward
from otat.transport.exact import ScaleError, exact_ot
from otat.transport.scores import heatmap_values, ot_distance, ot_match_probs
from otat.transport.sinkhorn import Marginals, SinkhornConfig, TransportPlan, round_to_polytope, sinkhorn

__all__ = [
    "CostKind",
    "CostMatrix",
    "Marginals",
    "ScaleError",
    "SinkhornConfig",
    "TransportPlan",
    "build_cost",
    "exact_ot",
    "heatmap_values",
    "ot_distance",
    "ot_match_probs",
    "pairwise_costs",
    "pairwise_costs_backward",
    "round_to_polytope",
    "sinkhorn",
]
