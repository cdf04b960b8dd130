"""Input validation helpers shared across the package.

Probability vectors and feature matrices are plain numpy arrays; these
helpers normalize dtypes and enforce the invariants the estimators rely on.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, DomainError, NumericError

SIMPLEX_ATOL = 1e-9


def check_vector(v, name="vector") -> np.ndarray:
    """Return ``v`` as a finite 1-d float64 array."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


def check_distribution(p, name="distribution", atol=SIMPLEX_ATOL) -> np.ndarray:
    """Validate a probability vector: nonnegative entries summing to one."""
    arr = check_vector(p, name)
    if arr.size == 0:
        raise DimensionError(f"{name} must be nonempty")
    if np.any(arr < -atol):
        raise DomainError(f"{name} has negative entries")
    total = float(arr.sum())
    if abs(total - 1.0) > atol:
        raise DomainError(f"{name} sums to {total!r}, expected 1 within {atol}")
    return np.clip(arr, 0.0, None)


def check_same_length(p, q, name="vectors") -> None:
    if len(p) != len(q):
        raise DimensionError(f"{name} have mismatched lengths {len(p)} and {len(q)}")


def check_matrix(X, name="X", feature_dim=None) -> np.ndarray:
    """Return ``X`` as a finite 2-d float64 array, optionally checking width."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    if feature_dim is not None and arr.shape[1] != feature_dim:
        raise DimensionError(
            f"{name} has {arr.shape[1]} columns, expected {feature_dim}"
        )
    return arr


def check_labels(y, n_classes=None, name="y", allow_unlabeled=True) -> np.ndarray:
    """Validate integer class labels; -1 marks an unlabeled row."""
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.floor(arr)):
            raise DomainError(f"{name} must contain integer class indices")
    arr = arr.astype(np.int64, copy=False)
    lo = -1 if allow_unlabeled else 0
    if arr.size and arr.min() < lo:
        raise DomainError(f"{name} has entries below {lo}")
    if n_classes is not None and arr.size and arr.max() >= n_classes:
        raise DomainError(f"{name} has entries >= n_classes ({n_classes})")
    return arr


def check_propensity(pi, clip_floor, name="propensity") -> np.ndarray:
    arr = check_vector(pi, name)
    if clip_floor <= 0:
        raise DomainError("clip_floor must be positive")
    if np.any(arr <= 0) or np.any(arr > 1 + SIMPLEX_ATOL):
        raise DomainError(f"{name} entries must lie in (0, 1]")
    return np.minimum(arr, 1.0)


def check_probability(x, name="probability") -> float:
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"{name} must lie in [0, 1], got {x}")
    return x


def check_open_unit(x, name="value") -> float:
    x = float(x)
    if not 0.0 < x < 1.0:
        raise DomainError(f"{name} must lie in (0, 1), got {x}")
    return x
