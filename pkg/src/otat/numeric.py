"""Dense float64 kernels shared by the solver, the blocks and the losses.

Every kernel accepts arrays with arbitrary leading batch dimensions and
operates on the trailing one or two axes. Backward helpers sit next to the
forward kernel they differentiate.
"""

import zlib

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "DomainError",
    "DegenerateInputError",
    "NumericalError",
    "as_matrix",
    "matmul",
    "softmax_rows",
    "softmax_rows_backward",
    "layer_norm",
    "layer_norm_backward",
    "cosine_similarity",
    "l2_normalize_rows",
    "l2_normalize_rows_backward",
    "gelu",
    "gelu_grad",
    "make_rng",
]

LN_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class DomainError(ValueError):
    """A scalar argument lies outside its admissible range."""


class DegenerateInputError(ValueError):
    """Input is well-shaped but degenerate (zero norm, empty set...)."""


class NumericalError(ArithmeticError):
    """A computation produced or received non-finite values."""


def as_matrix(x):
    """Return ``x`` as a C-contiguous float64 array."""
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a, b):
    """Matrix product of the trailing two axes, broadcasting leading axes."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m, temperature=1.0):
    """Row-wise softmax of ``m / temperature`` with max subtraction."""
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    z = as_matrix(m) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(dy, y, temperature=1.0):
    """Gradient w.r.t. the softmax input given output ``y`` and ``dL/dy``."""
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True)) / temperature


def layer_norm(m, gain, bias, eps=LN_EPS, return_cache=False):
    """Normalize each row to zero mean / unit variance, then apply gain and bias."""
    m = as_matrix(m)
    gain = as_matrix(gain)
    bias = as_matrix(bias)
    if gain.shape != (m.shape[-1],) or bias.shape != (m.shape[-1],):
        raise ShapeError(
            f"layer_norm affine terms {gain.shape}/{bias.shape} do not match width {m.shape[-1]}"
        )
    mu = m.mean(axis=-1, keepdims=True)
    xc = m - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = xhat * gain + bias
    if return_cache:
        return out, (xhat, inv_std, gain)
    return out


def layer_norm_backward(dout, cache):
    """Return ``(dx, dgain, dbias)`` for :func:`layer_norm`."""
    xhat, inv_std, gain = cache
    width = xhat.shape[-1]
    dgain = (dout * xhat).reshape(-1, width).sum(axis=0)
    dbias = dout.reshape(-1, width).sum(axis=0)
    dxhat = dout * gain
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def cosine_similarity(u, v):
    """Cosine of the angle between two nonzero vectors, clamped to [-1, 1]."""
    u = as_matrix(u).ravel()
    v = as_matrix(v).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"vector lengths differ: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def l2_normalize_rows(m, return_norms=False):
    """Scale every row of ``m`` to unit Euclidean norm."""
    m = as_matrix(m)
    norms = np.sqrt((m * m).sum(axis=-1, keepdims=True))
    if np.any(norms == 0):
        raise DegenerateInputError("cannot normalize a zero row")
    out = m / norms
    if return_norms:
        return out, norms
    return out


def l2_normalize_rows_backward(dy, y, norms):
    """Gradient through ``y = x / ||x||`` given the unit rows and the norms."""
    return (dy - y * (dy * y).sum(axis=-1, keepdims=True)) / norms


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Exact (erf-based) GELU."""
    return 0.5 * x * (1.0 + erf(x * _SQRT_HALF))


def gelu_grad(x):
    """Derivative of :func:`gelu`."""
    return 0.5 * (1.0 + erf(x * _SQRT_HALF)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def make_rng(seed, stream=""):
    """Counter-based generator for ``seed``, decorrelated per named stream.

    Streams let independent consumers (episode sampling, backbone init,
    adapter init) draw from their own sequence, so results do not depend on
    call order.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    if stream:
        key.append(zlib.crc32(stream.encode("utf-8")))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
