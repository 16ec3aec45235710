"""Small input-validation helpers used by the estimators and kernels."""

import numpy as np

from .exceptions import DimensionError, ParameterError


def as_float_array(x, ndim=None, name="array"):
    """Return ``x`` as a C-contiguous float64 array, checking its rank."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return arr


def check_batch(X, n_features=None, name="X"):
    """Validate a 2D batch (one example per row); a 1D vector becomes one row."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise DimensionError(f"{name} must be 2-dimensional, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ParameterError(f"{name} is empty")
    if n_features is not None and X.shape[1] != n_features:
        raise DimensionError(
            f"{name} has {X.shape[1]} features per example, expected {n_features}"
        )
    return np.ascontiguousarray(X)


def check_labels(y, n_classes, n_samples=None):
    y = np.asarray(y)
    if y.ndim != 1:
        raise DimensionError(f"labels must be 1-dimensional, got shape {y.shape}")
    if n_samples is not None and y.shape[0] != n_samples:
        raise DimensionError(f"got {y.shape[0]} labels for {n_samples} examples")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ParameterError("labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ParameterError(f"labels must lie in [0, {n_classes})")
    return y.astype(np.int64)


def check_window(window, ndim):
    window = tuple(int(a) for a in window)
    if len(window) != ndim:
        raise DimensionError(f"window must have {ndim} entries, got {window}")
    if min(window) < 1:
        raise ParameterError(f"window entries must be >= 1, got {window}")
    return window


def check_positive(value, name):
    if not value > 0:
        raise ParameterError(f"{name} must be positive, got {value}")
    return value
