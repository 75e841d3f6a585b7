"""Input validation helpers shared across estimators and loaders."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError

SIMPLEX_ATOL = 1e-6


def check_finite(x, name: str = "array") -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_simplex(p, name: str = "distribution", atol: float = SIMPLEX_ATOL) -> np.ndarray:
    """Validate a probability vector (or rows of a matrix)."""
    arr = check_finite(p, name)
    if np.any(arr < -atol):
        raise ValueError(f"{name} has negative entries")
    total = arr.sum(axis=-1)
    if not np.allclose(total, 1.0, atol=atol):
        raise ValueError(f"{name} rows must sum to 1 (got {total})")
    return arr


def check_positive(x, name: str = "value"):
    arr = np.asarray(x, dtype=float)
    if np.any(arr <= 0):
        raise ValueError(f"{name} must be strictly positive")
    return arr


def check_length(x, n: int, name: str = "vector") -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.shape[-1] != n:
        raise ValueError(f"{name} must have length {n}, got {arr.shape[-1]}")
    return arr


def check_index(i: int, n: int, name: str = "index") -> int:
    i = int(i)
    if not 0 <= i < n:
        raise ValueError(f"{name} {i} out of range [0, {n})")
    return i


def check_is_fitted(estimator, attribute: str) -> None:
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted; call fit() first"
        )
