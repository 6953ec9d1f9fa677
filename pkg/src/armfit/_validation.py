"""Input validation helpers used throughout the package."""
from __future__ import annotations

import numpy as np

from .errors import ValidationError

# A matrix is treated as singular when its smallest pivot from a
# rank-revealing factorization falls below RANK_TOL times the largest.
RANK_TOL = 1e-10


def as_float_vector(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise ValidationError(f"{name} contains a non-finite value at position {bad}")
    return arr


def as_float_matrix(m, name: str, *, allow_empty_cols: bool = False) -> np.ndarray:
    arr = np.asarray(m, dtype=float)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be two-dimensional, got shape {arr.shape}")
    if arr.shape[1] == 0 and not allow_empty_cols:
        raise ValidationError(f"{name} has no columns")
    if not np.all(np.isfinite(arr)):
        i, j = np.argwhere(~np.isfinite(arr))[0]
        raise ValidationError(f"{name} contains a non-finite value at row {i}, column {j}")
    return arr


def as_int_vector(v, name: str) -> np.ndarray:
    arr = np.asarray(v)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be one-dimensional, got shape {arr.shape}")
    out = arr.astype(np.int64)
    if not np.array_equal(out, np.asarray(arr, dtype=float)):
        raise ValidationError(f"{name} must contain integers")
    return out


def center_columns(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (centered copy, applied column shift)."""
    shift = X.mean(axis=0) if X.size else np.zeros(X.shape[1])
    return X - shift, shift


def check_centered(X: np.ndarray, name: str, tol: float = 1e-8) -> None:
    if X.shape[1] == 0:
        return
    scale = 1.0 + np.abs(X).max(initial=0.0)
    worst = np.abs(X.mean(axis=0)).max()
    if worst > tol * scale:
        raise ValidationError(
            f"{name} must have zero column means (worst deviation {worst:.3g}); "
            "center the columns or use an entry point that centers internally"
        )


def freeze(arr: np.ndarray) -> np.ndarray:
    """Mark an array immutable so shared values stay safe across threads."""
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr
