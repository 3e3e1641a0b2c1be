import numpy as np

from otat.numeric import DomainError, NumericalError

__all__ = ["grad_check", "numeric_gradient", "flatten_params", "assign_flat"]


def numeric_gradient(f, theta, h=1e-5):
    """Central-difference gradient of a scalar function ``f`` at ``theta``."""
    theta = np.array(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    for k in range(theta.size):
        old = theta.flat[k]
        theta.flat[k] = old + h
        fp = float(f(theta))
        theta.flat[k] = old - h
        fm = float(f(theta))
        theta.flat[k] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"loss is not finite around coordinate {k}")
        g.flat[k] = (fp - fm) / (2.0 * h)
    return g


def grad_check(theta, loss_and_grad, h=1e-5):
    """Largest per-coordinate disagreement between analytic and numeric gradients.

    ``loss_and_grad(theta)`` returns ``(loss, grad)``. The error for one
    coordinate is ``|g_a - g_n| / max(1, |g_a|, |g_n|)``.
    """
    if not 1e-6 <= h <= 1e-4:
        raise DomainError(f"step h={h} outside [1e-6, 1e-4]")
    theta = np.array(theta, dtype=np.float64)
    loss, analytic = loss_and_grad(theta.copy())
    if not np.isfinite(loss):
        raise NumericalError("loss is not finite at theta")
    numeric = numeric_gradient(lambda t: loss_and_grad(t)[0], theta, h)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(theta.shape)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if theta.size else 0.0


def flatten_params(params, names=None):
    """Concatenate named arrays (sorted by name unless ``names`` is given)."""
    names = sorted(params) if names is None else list(names)
    if not names:
        return np.zeros(0), names
    return np.concatenate([np.ravel(params[n]) for n in names]), names


def assign_flat(params, names, theta):
    """Write a flat vector back into the named arrays in place."""
    offset = 0
    for n in names:
        arr = params[n]
        arr[...] = np.reshape(theta[offset : offset + arr.size], arr.shape)
        offset += arr.size
    if offset != np.size(theta):
        raise ValueError("flat vector length does not match the parameters")
