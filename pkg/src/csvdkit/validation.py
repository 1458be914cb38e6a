"""Input validation helpers.

Every array entering the pipeline passes through one of these so that bad
data fails early with a message naming the offending row/column instead of
surfacing as a NaN deep inside a distance computation.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def check_finite(arr: np.ndarray, name: str = "input") -> None:
    """Raise DataError naming the first non-finite entry, if any."""
    if np.isfinite(arr).all():
        return
    bad = np.argwhere(~np.isfinite(np.atleast_2d(arr)))
    i, j = bad[0]
    if arr.ndim <= 1:
        raise DataError(f"{name} has a non-finite value at index {j}")
    raise DataError(f"{name} has a non-finite value at row {i}, column {j}")


def as_matrix(X, name: str = "X") -> np.ndarray:
    """Coerce to a finite, C-contiguous float64 2-D array."""
    arr = np.ascontiguousarray(X, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"{name} must be a 2-D matrix, got ndim={arr.ndim}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError(f"{name} must be non-empty, got shape {arr.shape}")
    check_finite(arr, name)
    return arr


def as_vector(v, length: int | None = None, name: str = "vector") -> np.ndarray:
    """Coerce to a finite float64 1-D array, optionally of a fixed length."""
    arr = np.asarray(v, dtype=np.float64).ravel()
    if length is not None and arr.shape[0] != length:
        raise DataError(f"{name} has length {arr.shape[0]}, expected {length}")
    check_finite(arr, name)
    return arr


def check_square_symmetric(C, name: str = "matrix", tol: float = 1e-8) -> np.ndarray:
    """Validate a square symmetric matrix (within tol, relative to its scale)."""
    arr = np.asarray(C, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DataError(f"{name} must be square, got shape {arr.shape}")
    check_finite(arr, name)
    scale = max(1.0, float(np.abs(arr).max()))
    asym = float(np.abs(arr - arr.T).max())
    if asym > tol * scale:
        raise DataError(f"{name} is not symmetric: max asymmetry {asym:.3e}")
    return arr
