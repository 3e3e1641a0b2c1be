from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from otat.numeric import DomainError, NumericalError, ShapeError, as_matrix
from otat.transport.cost import CostMatrix

__all__ = [
    "Marginals",
    "SinkhornConfig",
    "TransportPlan",
    "round_to_polytope",
    "sinkhorn",
    "uniform_marginals",
]


@dataclass(frozen=True)
class Marginals:
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        for name in ("a", "b"):
            w = as_matrix(getattr(self, name))
            if w.ndim != 1 or w.size == 0:
                raise ShapeError(f"marginal {name} must be a non-empty vector")
            if np.any(w <= 0) or not np.all(np.isfinite(w)):
                raise DomainError(f"marginal {name} must be strictly positive and finite")
            object.__setattr__(self, name, w)
        if abs(self.a.sum() - 1.0) > 1e-12 or abs(self.b.sum() - 1.0) > 1e-12:
            raise DomainError("marginals must each sum to 1")

    @classmethod
    def uniform(cls, n, m):
        return cls(np.full(n, 1.0 / n), np.full(m, 1.0 / m))


def uniform_marginals(n, m):
    return Marginals.uniform(n, m)


@dataclass(frozen=True)
class SinkhornConfig:
    lam: float = 10.0
    max_iters: int = 100
    tol: float = 1e-6
    stabilized: bool = True

    def __post_init__(self):
        if not self.lam > 0:
            raise DomainError(f"lambda must be positive, got {self.lam}")
        if int(self.max_iters) < 1:
            raise DomainError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.tol > 0:
            raise DomainError(f"tol must be positive, got {self.tol}")


@dataclass(frozen=True)
class TransportPlan:
    """Result of a Sinkhorn solve.

    For batched solves ``iterations``, ``converged`` and ``final_residual``
    are arrays over the batch axes; for a single problem they are scalars.
    """

    plan: np.ndarray
    iterations: object
    converged: object
    final_residual: object

    @property
    def shape(self):
        return self.plan.shape


def _unpack(x):
    if isinstance(x, CostMatrix):
        return as_matrix(x.values)
    return as_matrix(x)


def _scalarize(x):
    return x.item() if np.ndim(x) == 0 else x


def sinkhorn(cost, marginals=None, cfg=None):
    """Entropy-regularized transport plan by alternating diagonal scaling.

    The kernel is ``exp(-lam * C)`` and the scalings ``p, q`` start at ones.
    The reference plan before the first iteration is the row-scaled kernel
    ``diag(a / K 1) K``, so an instance that is solved by one sweep (a single
    cell, a constant cost) reports one iteration. Each iteration applies ``p <- a / (K q)`` then ``q <- b / (K^T p)`` and
    materializes ``T = diag(p) K diag(q)``. A problem stops once the
    Frobenius change of ``T`` between iterations drops below ``tol`` and its
    row sums are within ``tol`` of ``a`` (columns are exact after each
    ``q`` update). The second test guards against stalls at large ``lam``,
    where the plan creeps while still far from feasible.

    ``cost`` may carry leading batch axes; each problem in the batch stops
    independently, so a batched solve matches solving each problem alone.
    With ``stabilized=True`` the scalings are kept as logarithms and updated
    with log-sum-exp, which cannot underflow.
    """
    cfg = cfg or SinkhornConfig()
    c = _unpack(cost)
    if c.ndim < 2:
        raise ShapeError(f"cost must be at least 2-D, got {c.shape}")
    n, m = c.shape[-2:]
    if marginals is None:
        marginals = Marginals.uniform(n, m)
    a, b = marginals.a, marginals.b
    if a.shape != (n,) or b.shape != (m,):
        raise ShapeError(f"marginals {a.shape}/{b.shape} do not match cost {c.shape}")
    if not np.all(np.isfinite(c)):
        raise NumericalError("cost matrix contains non-finite values")

    batch = c.shape[:-2]
    log_k = -cfg.lam * c
    iterations = np.zeros(batch, dtype=np.int64)
    converged = np.zeros(batch, dtype=bool)
    residual = np.full(batch, np.inf)
    active = np.ones(batch, dtype=bool)
    mask = active[..., None, None]

    if cfg.stabilized:
        log_a, log_b = np.log(a), np.log(b)
        f = np.zeros(batch + (n,))
        g = np.zeros(batch + (m,))
        plan = np.exp(log_a[:, None] - logsumexp(log_k, axis=-1)[..., :, None] + log_k)
        for _ in range(int(cfg.max_iters)):
            f_new = log_a - logsumexp(log_k + g[..., None, :], axis=-1)
            g_new = log_b - logsumexp(log_k + f_new[..., :, None], axis=-2)
            new_plan = np.exp(f_new[..., :, None] + log_k + g_new[..., None, :])
            step = np.sqrt(((new_plan - plan) ** 2).sum(axis=(-2, -1)))
            f = np.where(active[..., None], f_new, f)
            g = np.where(active[..., None], g_new, g)
            plan = np.where(mask, new_plan, plan)
            residual = np.where(active, step, residual)
            iterations = iterations + active
            row_gap = np.abs(new_plan.sum(axis=-1) - a).max(axis=-1)
            done = active & (step < cfg.tol) & (row_gap <= cfg.tol)
            converged |= done
            active &= ~done
            mask = active[..., None, None]
            if not active.any():
                break
    else:
        kernel = np.exp(log_k)
        p = np.ones(batch + (n,))
        q = np.ones(batch + (m,))
        rows = kernel.sum(axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            plan = np.where(rows[..., None] > 0, kernel * (a / rows)[..., :, None], 0.0)
        for _ in range(int(cfg.max_iters)):
            kq = (kernel @ q[..., :, None])[..., 0]
            if np.any(kq[active] == 0):
                raise NumericalError("kernel underflow: zero denominator in row scaling")
            with np.errstate(divide="ignore"):
                p_new = a / kq
            ktp = (np.swapaxes(kernel, -1, -2) @ p_new[..., :, None])[..., 0]
            if np.any(ktp[active] == 0):
                raise NumericalError("kernel underflow: zero denominator in column scaling")
            with np.errstate(divide="ignore"):
                q_new = b / ktp
            new_plan = p_new[..., :, None] * kernel * q_new[..., None, :]
            step = np.sqrt(((new_plan - plan) ** 2).sum(axis=(-2, -1)))
            p = np.where(active[..., None], p_new, p)
            q = np.where(active[..., None], q_new, q)
            plan = np.where(mask, new_plan, plan)
            residual = np.where(active, step, residual)
            iterations = iterations + active
            row_gap = np.abs(new_plan.sum(axis=-1) - a).max(axis=-1)
            done = active & (step < cfg.tol) & (row_gap <= cfg.tol)
            converged |= done
            active &= ~done
            mask = active[..., None, None]
            if not active.any():
                break
        if not np.all(np.isfinite(plan)):
            raise NumericalError("direct Sinkhorn produced non-finite entries")

    return TransportPlan(
        plan=plan,
        iterations=_scalarize(iterations),
        converged=_scalarize(converged),
        final_residual=_scalarize(residual),
    )


def round_to_polytope(plan, marginals):
    """Nearest-style rounding of an approximate plan onto the feasible set.

    Rows and then columns are scaled down where they exceed their marginal,
    and the remaining deficits are filled with a rank-one correction. The
    result has exact marginals (up to float rounding) and differs from the
    input by at most twice the total marginal violation in l1.
    """
    t = as_matrix(plan.plan if isinstance(plan, TransportPlan) else plan)
    a, b = marginals.a, marginals.b
    with np.errstate(divide="ignore", invalid="ignore"):
        rows = np.minimum(np.where(t.sum(axis=-1) > 0, a / t.sum(axis=-1), 1.0), 1.0)
        t = t * rows[..., :, None]
        cols = np.minimum(np.where(t.sum(axis=-2) > 0, b / t.sum(axis=-2), 1.0), 1.0)
        t = t * cols[..., None, :]
    err_a = a - t.sum(axis=-1)
    err_b = b - t.sum(axis=-2)
    mass = err_a.sum(axis=-1)[..., None, None]
    correction = np.where(mass > 0, err_a[..., :, None] * err_b[..., None, :] / np.where(mass > 0, mass, 1.0), 0.0)
    return t + correction
