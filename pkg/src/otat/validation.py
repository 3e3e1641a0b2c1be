"""Input checks for token-set arrays, built on scikit-learn's validators."""

import numpy as np
from sklearn.utils.validation import check_array, column_or_1d

from otat.numeric import ShapeError

__all__ = ["check_tokens", "check_text", "check_labels"]


def check_tokens(X, name="X", width=None):
    """Validate a batch of token sets, returning a float64 (N, L, D) array."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64, input_name=name)
    if X.ndim != 3:
        raise ShapeError(f"{name} must be (items, tokens, dim), got shape {X.shape}")
    if X.shape[1] < 1:
        raise ShapeError(f"{name} needs at least one token per item")
    if width is not None and X.shape[2] != width:
        raise ShapeError(f"{name} has width {X.shape[2]}, expected {width}")
    return X


def check_text(text, n_classes, width):
    text = check_tokens(text, "text", width=width)
    if text.shape[0] != n_classes:
        raise ShapeError(f"expected one text token set per class ({n_classes}), got {text.shape[0]}")
    return text


def check_labels(y, n_rows):
    """Return ``(classes, encoded)`` with labels mapped to 0..C-1."""
    y = column_or_1d(y, warn=True)
    if y.shape[0] != n_rows:
        raise ShapeError(f"got {y.shape[0]} labels for {n_rows} items")
    classes, encoded = np.unique(y, return_inverse=True)
    return classes, encoded
