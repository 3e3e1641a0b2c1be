"""Training objectives: cosine classification, OT matching, entropy-aware weighting.

Every loss returns its value together with gradients w.r.t. its array inputs.
Transport plans and prototypes arrive as constants, so no gradient ever runs
through Sinkhorn iterations or prototype updates.
"""

from dataclasses import dataclass, replace

import numpy as np

from otat.numeric import (
    DegenerateInputError,
    DomainError,
    NumericalError,
    ShapeError,
    as_matrix,
    softmax_rows,
    softmax_rows_backward,
)

__all__ = [
    "LossWeights",
    "PrototypeBank",
    "loss_cos",
    "loss_ota",
    "update_prototypes",
    "eaw_terms",
    "loss_eaw",
    "loss_total",
]


@dataclass(frozen=True)
class LossWeights:
    xi: float = 1.0
    nu: float = 0.08
    zeta: float = 0.1
    tau: float = 0.07
    eps2: float = 1e-8

    def __post_init__(self):
        if not self.tau > 0:
            raise DomainError(f"tau must be positive, got {self.tau}")
        if not self.eps2 > 0:
            raise DomainError(f"eps2 must be positive, got {self.eps2}")


@dataclass(frozen=True)
class PrototypeBank:
    """EMA class prototypes with a blend factor that grows per update.

    ``mu`` is recomputed from the step counter as
    ``min(mu_init + mu_step * step, mu_max)`` so the schedule has no
    accumulated rounding.
    """

    prototypes: np.ndarray
    mu_init: float = 0.5
    mu_step: float = 0.02
    mu_max: float = 1.0
    step: int = 0

    @classmethod
    def zeros(cls, n_classes, dim, **kwargs):
        return cls(np.zeros((n_classes, dim)), **kwargs)

    @property
    def mu(self):
        return min(self.mu_init + self.mu_step * self.step, self.mu_max)

    @property
    def n_classes(self):
        return self.prototypes.shape[0]


def _labels(labels, n_classes, n_rows):
    y = np.asarray(labels)
    if y.shape != (n_rows,):
        raise ShapeError(f"expected {n_rows} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise IndexError("labels must be integer class indices")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise IndexError(f"labels must lie in [0, {n_classes})")
    return y


def _check_unit(m, name):
    norms = np.sqrt((m * m).sum(axis=-1))
    if not np.allclose(norms, 1.0, atol=1e-8):
        raise DomainError(f"{name} rows must be unit-norm")


def _cross_entropy(logits, y):
    probs = softmax_rows(logits)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), y]))
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    return loss, dlogits / n


def loss_cos(image_embs, text_embs, labels, tau):
    """Cross-entropy of ``softmax(cos(v_i, t_j) / tau)`` at the true class.

    Returns ``(loss, d_image_embs, d_text_embs)``.
    """
    if not tau > 0:
        raise DomainError(f"tau must be positive, got {tau}")
    v = as_matrix(image_embs)
    t = as_matrix(text_embs)
    if v.shape[1] != t.shape[1]:
        raise ShapeError(f"embedding widths differ: {v.shape} vs {t.shape}")
    _check_unit(v, "image embedding")
    _check_unit(t, "text embedding")
    y = _labels(labels, t.shape[0], v.shape[0])
    loss, dlogits = _cross_entropy(v @ t.T / tau, y)
    dsim = dlogits / tau
    return loss, dsim @ t, dsim.T @ v


def loss_ota(ot_distances, labels, tau):
    """Negative log OT-match probability of the true class.

    ``ot_distances`` is (N, C); returns ``(loss, d_distances)``.
    """
    if not tau > 0:
        raise DomainError(f"tau must be positive, got {tau}")
    w = as_matrix(ot_distances)
    y = _labels(labels, w.shape[1], w.shape[0])
    loss, dlogits = _cross_entropy((1.0 - w) / tau, y)
    return loss, -dlogits / tau


def update_prototypes(bank, embs, labels):
    """Blend per-class means of the normalized rows into the bank, then advance ``mu``."""
    e = as_matrix(embs)
    norms = np.sqrt((e * e).sum(axis=1, keepdims=True))
    if np.any(norms == 0):
        raise DegenerateInputError("cannot build prototypes from a zero embedding")
    e = e / norms
    y = _labels(labels, bank.n_classes, e.shape[0])
    mu = bank.mu
    protos = bank.prototypes.copy()
    for c in np.unique(y):
        fresh = e[y == c].mean(axis=0)
        protos[c] = mu * bank.prototypes[c] + (1.0 - mu) * fresh
    return replace(bank, prototypes=protos, step=bank.step + 1)


def _unit_or_zero(m):
    norms = np.sqrt((m * m).sum(axis=1, keepdims=True))
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def eaw_terms(bank, text_embs, weights):
    """Similarity distribution ``p``, entropy ``r``, difficulty weights ``k`` and losses."""
    if not weights.tau > 0:
        raise DomainError(f"tau must be positive, got {weights.tau}")
    t = as_matrix(text_embs)
    n_classes = t.shape[0]
    if n_classes < 2:
        raise DegenerateInputError("entropy-aware weighting needs at least two classes")
    if bank.prototypes.shape != t.shape:
        raise ShapeError(f"prototypes {bank.prototypes.shape} do not match texts {t.shape}")
    protos = _unit_or_zero(bank.prototypes)
    return _eaw_from_sims(protos @ t.T, weights, protos)


def _eaw_from_sims(sims, weights, protos=None):
    n_classes = sims.shape[0]
    p = softmax_rows(sims, weights.tau)
    r = -float((p * np.log(p + weights.eps2)).sum()) / n_classes
    k = 1.0 - p.max(axis=1)
    difficulty = -float((k[:, None] * p).sum()) / n_classes
    return {
        "p": p,
        "r": r,
        "k": k,
        "difficulty": difficulty,
        "loss": difficulty - weights.zeta * r,
        "sims": sims,
        "protos": protos,
    }


def loss_eaw(bank, text_embs, weights):
    """Difficulty-weighted similarity minus ``zeta`` times the entropy term.

    Prototypes are constants; returns ``(loss, d_text_embs)``.
    """
    terms = eaw_terms(bank, text_embs, weights)
    p, k, protos = terms["p"], terms["k"], terms["protos"]
    n_classes = p.shape[0]
    eps = weights.eps2
    top = np.argmax(p, axis=1)
    rows = np.arange(n_classes)
    # printed form sum_j k_c p_cj, differentiated as written
    ddiff = -np.repeat(k[:, None], n_classes, axis=1) / n_classes
    ddiff[rows, top] += p.sum(axis=1) / n_classes
    dr = -(np.log(p + eps) + p / (p + eps)) / n_classes
    dp = ddiff - weights.zeta * dr
    dsims = softmax_rows_backward(dp, p, weights.tau)
    return terms["loss"], dsims.T @ protos


def loss_total(l_cos, l_ota, l_eaw, weights):
    """``L_cos + xi * L_OTA + nu * L_EAW``."""
    parts = (l_cos, l_ota, l_eaw)
    if not all(np.isfinite(x) for x in parts):
        raise NumericalError(f"non-finite loss component: cos={l_cos} ota={l_ota} eaw={l_eaw}")
    return l_cos + weights.xi * l_ota + weights.nu * l_eaw
