import numpy as np

from otat.numeric import ShapeError, as_matrix, softmax_rows
from otat.transport.cost import CostMatrix
from otat.transport.sinkhorn import TransportPlan

__all__ = ["ot_distance", "ot_match_probs", "heatmap_values"]


def _arrays(plan, cost):
    t = as_matrix(plan.plan if isinstance(plan, TransportPlan) else plan)
    c = as_matrix(cost.values if isinstance(cost, CostMatrix) else cost)
    if t.shape[-2:] != c.shape[-2:]:
        raise ShapeError(f"plan {t.shape} and cost {c.shape} do not match")
    return t, c


def ot_distance(plan, cost):
    """Transport cost ``<T, C>`` summed over the trailing two axes."""
    t, c = _arrays(plan, cost)
    return (t * c).sum(axis=(-2, -1))


def ot_match_probs(distances, tau):
    """Class posterior ``softmax((1 - W) / tau)`` over the last axis."""
    w = as_matrix(distances)
    if not np.all(np.isfinite(w)):
        raise ValueError("distances must be finite")
    return softmax_rows(1.0 - w, tau)


def heatmap_values(plan, cost):
    """Per-visual-token score ``1 - sum_j T_ij C_ij``."""
    t, c = _arrays(plan, cost)
    return 1.0 - (t * c).sum(axis=-1)
