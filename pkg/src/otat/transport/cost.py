from dataclasses import dataclass
from enum import Enum

import numpy as np

from otat.numeric import (
    DegenerateInputError,
    ShapeError,
    as_matrix,
    l2_normalize_rows,
    l2_normalize_rows_backward,
)

__all__ = ["CostKind", "CostMatrix", "build_cost", "pairwise_costs", "pairwise_costs_backward"]


class CostKind(str, Enum):
    COSINE = "cosine"
    EUCLIDEAN = "euclidean"
    CONSTANT = "constant"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(
                f"unknown cost kind {value!r}; expected one of {[k.value for k in cls]}"
            ) from None


@dataclass(frozen=True)
class CostMatrix:
    """Ground cost between visual tokens (rows) and text tokens (columns)."""

    values: np.ndarray
    kind: CostKind = CostKind.COSINE

    @property
    def shape(self):
        return self.values.shape


def _check_pair(v, t):
    v = as_matrix(v)
    t = as_matrix(t)
    if v.ndim < 2 or t.ndim < 2:
        raise ShapeError(f"token sets must be (tokens, dim), got {v.shape} and {t.shape}")
    if v.shape[-1] != t.shape[-1]:
        raise ShapeError(f"token widths differ: {v.shape[-1]} vs {t.shape[-1]}")
    return v, t


def _normalize(x):
    try:
        return l2_normalize_rows(x, return_norms=True)
    except DegenerateInputError:
        raise DegenerateInputError("cosine cost needs nonzero token rows") from None


def build_cost(v, t, kind=CostKind.COSINE):
    """Cost matrix between the rows of ``v`` (L1 x D) and ``t`` (L2t x D).

    Leading batch axes broadcast, so ``v`` of shape (..., L1, D) and ``t`` of
    shape (..., L2t, D) give a (..., L1, L2t) cost.
    """
    kind = CostKind.parse(kind)
    v, t = _check_pair(v, t)
    shape = np.broadcast_shapes(v.shape[:-2], t.shape[:-2]) + (v.shape[-2], t.shape[-2])
    if kind is CostKind.CONSTANT:
        values = np.ones(shape)
    elif kind is CostKind.COSINE:
        vh, _ = _normalize(v)
        th, _ = _normalize(t)
        values = np.clip(1.0 - vh @ np.swapaxes(th, -1, -2), 0.0, 2.0)
    else:
        diff = v[..., :, None, :] - t[..., None, :, :]
        values = np.sqrt((diff * diff).sum(axis=-1))
    return CostMatrix(values=values, kind=kind)


def pairwise_costs(v, t, kind=CostKind.COSINE):
    """All-pairs costs between N visual sets and C text sets.

    ``v`` is (N, L1, D) and ``t`` is (C, L2t, D); the result is
    (N, C, L1, L2t) plus a cache for :func:`pairwise_costs_backward`.
    """
    kind = CostKind.parse(kind)
    v, t = _check_pair(v, t)
    n, l1, _ = v.shape
    c, l2, _ = t.shape
    if kind is CostKind.CONSTANT:
        return np.ones((n, c, l1, l2)), (kind, None)
    if kind is CostKind.COSINE:
        vh, vn = _normalize(v)
        th, tn = _normalize(t)
        # no clipping here: the backward pass must see the smooth expression
        values = 1.0 - np.einsum("nid,cjd->ncij", vh, th)
        return values, (kind, (vh, vn, th, tn))
    diff = v[:, None, :, None, :] - t[None, :, None, :, :]
    values = np.sqrt((diff * diff).sum(axis=-1))
    return values, (kind, (diff, values))


def pairwise_costs_backward(dcost, cache):
    """Return ``(dv, dt)`` for :func:`pairwise_costs`."""
    kind, saved = cache
    if kind is CostKind.CONSTANT:
        return None, None
    if kind is CostKind.COSINE:
        vh, vn, th, tn = saved
        dvh = -np.einsum("ncij,cjd->nid", dcost, th)
        dth = -np.einsum("ncij,nid->cjd", dcost, vh)
        return l2_normalize_rows_backward(dvh, vh, vn), l2_normalize_rows_backward(dth, th, tn)
    diff, dist = saved
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(dist > 0, dcost / dist, 0.0)[..., None] * diff
    return w.sum(axis=(1, 3)), -w.sum(axis=(0, 2))
