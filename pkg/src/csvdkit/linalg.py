"""Dense numeric kernels: studentization, covariance, eigendecomposition,
rotation, variance-loss (NMSE) measures, and squared-distance primitives.

All build math is float64. Conventions worth stating once:

* studentization divides by the *sample* standard deviation (1/(M-1));
* covariance is the population form C = (1/M) X^T X over centered rows.

The asymmetry is deliberate: the scaler normalizes features the way a
statistician would, while the covariance feeding the eigensolver keeps the
plain quadratic form whose eigenvalues are the per-coordinate variances of
the rotated data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError
from .validation import as_matrix, as_vector, check_square_symmetric

# Negative eigenvalues closer to zero than this (times the spectral scale)
# are round-off and get clamped; anything larger is a real failure.
EIG_CLAMP_REL = 1e-10
EIG_RESIDUAL_REL = 1e-7


@dataclass
class FeatureMatrix:
    """A studentized feature table plus the column statistics that produced it.

    data        : (M, N) float64, each column zero-mean and (where the raw
                  column varied) unit sample standard deviation
    col_means   : (N,) raw column means
    col_stds    : (N,) raw sample stds (ddof=1); exactly 0.0 for flagged columns
    degenerate  : (N,) bool, True for zero-variance columns (kept as zeros so
                  N is stable across the pipeline)
    """

    data: np.ndarray
    col_means: np.ndarray
    col_stds: np.ndarray
    degenerate: np.ndarray

    @property
    def n_points(self) -> int:
        return self.data.shape[0]

    @property
    def n_features(self) -> int:
        return self.data.shape[1]


@dataclass
class EigenSystem:
    """Orthonormal eigenvectors (columns) and nonincreasing eigenvalues."""

    eigenvectors: np.ndarray
    eigenvalues: np.ndarray


def studentize(raw) -> FeatureMatrix:
    """Shift/scale each column to zero mean and unit sample std.

    Columns with zero variance (including the M=1 case, where the sample std
    is undefined) become all-zero and are flagged in ``degenerate``.
    """
    X = as_matrix(raw, "raw")
    m = X.shape[0]
    means = X.mean(axis=0)
    if m > 1:
        stds = X.std(axis=0, ddof=1)
    else:
        stds = np.zeros(X.shape[1])
    degenerate = stds == 0.0
    safe = np.where(degenerate, 1.0, stds)
    data = (X - means) / safe
    data[:, degenerate] = 0.0
    return FeatureMatrix(data=data, col_means=means, col_stds=np.where(degenerate, 0.0, stds), degenerate=degenerate)


def apply_studentization(raw, stats: FeatureMatrix | None = None, *, col_means=None, col_stds=None, degenerate=None) -> np.ndarray:
    """Apply stored column statistics to new vectors (1-D or 2-D)."""
    if stats is not None:
        col_means, col_stds, degenerate = stats.col_means, stats.col_stds, stats.degenerate
    arr = np.asarray(raw, dtype=np.float64)
    single = arr.ndim == 1
    Q = np.atleast_2d(arr)
    if Q.shape[1] != col_means.shape[0]:
        raise DataError(f"query has {Q.shape[1]} features, expected {col_means.shape[0]}")
    safe = np.where(degenerate, 1.0, col_stds)
    out = (Q - col_means) / safe
    out[:, degenerate] = 0.0
    return out[0] if single else out


def covariance(X, center=None) -> np.ndarray:
    """Population covariance C = (1/M) X^T X of (already or herein) centered rows."""
    Xc = as_matrix(X, "X")
    if center is not None:
        Xc = Xc - as_vector(center, Xc.shape[1], "center")
    m = Xc.shape[0]
    C = (Xc.T @ Xc) / m
    return (C + C.T) / 2.0  # kill BLAS round-off asymmetry


def eigendecompose(C) -> EigenSystem:
    """Symmetric eigendecomposition with a deterministic ordering.

    Eigenvalues come back nonincreasing; each eigenvector is flipped so its
    largest-magnitude component (lowest index on ties) is positive. Tiny
    negative eigenvalues from round-off are clamped to zero.
    """
    C = check_square_symmetric(C, "covariance")
    try:
        vals, vecs = np.linalg.eigh(C)
    except np.linalg.LinAlgError as exc:
        n = C.shape[0]
        off = float(np.sqrt(np.sum((C - np.diag(np.diag(C))) ** 2))) if n > 1 else 0.0
        raise NumericError(f"eigendecomposition failed to converge (off-diagonal norm {off:.3e})") from exc

    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vecs = vecs[:, order]

    scale = max(float(vals[0]), 1.0) if vals.size else 1.0
    floor = -EIG_CLAMP_REL * scale
    if vals.min(initial=0.0) < floor:
        raise NumericError(f"covariance has a significantly negative eigenvalue {vals.min():.3e}")
    np.clip(vals, 0.0, None, out=vals)

    # Sign convention: largest-|component| entry positive, ties to lowest index.
    anchor = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[anchor, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    vecs = vecs * signs

    resid = np.abs(C @ vecs - vecs * vals).max(initial=0.0)
    if resid > EIG_RESIDUAL_REL * max(1.0, scale):
        raise NumericError(f"eigendecomposition residual {resid:.3e} exceeds tolerance")
    return EigenSystem(eigenvectors=vecs, eigenvalues=vals)


def singular_values_from_eigenvalues(eigenvalues, m: int) -> np.ndarray:
    """sigma_i = sqrt(M * lambda_i) for a covariance built from M rows."""
    lam = as_vector(eigenvalues, name="eigenvalues")
    if m < 1:
        raise DataError("row count must be >= 1")
    scale = max(float(lam.max(initial=0.0)), 1.0)
    if lam.min(initial=0.0) < -EIG_CLAMP_REL * scale:
        raise NumericError(f"negative eigenvalue {lam.min():.3e} beyond clamp tolerance")
    return np.sqrt(m * np.clip(lam, 0.0, None))


def rotate(X_centered, V) -> np.ndarray:
    """Coordinate rotation Y = X V into the uncorrelated frame (an isometry)."""
    X = np.asarray(X_centered, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if X.ndim != 2 or V.ndim != 2 or X.shape[1] != V.shape[0]:
        raise DataError(f"cannot rotate shape {X.shape} by basis shape {V.shape}")
    return X @ V


def nmse_global(eigenvalues, n_retained: int) -> float:
    """Fraction of variance discarded when keeping the first n coordinates:
    sum of the trailing eigenvalues over their total."""
    lam = as_vector(eigenvalues, name="eigenvalues")
    if not 0 <= n_retained <= lam.shape[0]:
        raise DataError(f"retained count {n_retained} out of range [0, {lam.shape[0]}]")
    total = float(lam.sum())
    if total <= 0.0:
        raise NumericError("all-zero spectrum: variance fraction is undefined")
    return float(lam[n_retained:].sum()) / total


def nmse_residual(Y_rotated, n_retained: int) -> float:
    """Data-side counterpart of nmse_global: energy of the discarded rotated
    coordinates over total energy. Agrees with the eigenvalue form on exact
    rotations; the pair is cross-checked in tests."""
    Y = as_matrix(Y_rotated, "Y")
    if not 0 <= n_retained <= Y.shape[1]:
        raise DataError(f"retained count {n_retained} out of range [0, {Y.shape[1]}]")
    total = float(np.sum(Y * Y))
    if total <= 0.0:
        raise NumericError("zero-energy data: variance fraction is undefined")
    return float(np.sum(Y[:, n_retained:] ** 2)) / total


def squared_distance(u, v) -> float:
    """Sum of squared coordinate differences."""
    ua = np.asarray(u, dtype=np.float64).ravel()
    va = np.asarray(v, dtype=np.float64).ravel()
    if ua.shape[0] != va.shape[0]:
        raise DataError(f"length mismatch: {ua.shape[0]} vs {va.shape[0]}")
    d = ua - va
    return float(d @ d)


def squared_distance_from_norms(norm_u_sq: float, norm_v_sq: float, dot_uv: float) -> float:
    """Inner-product form ||u||^2 + ||v||^2 - 2 u.v, clamped at zero.

    The fast path for scans over stored points with precomputed norms; must
    agree with squared_distance within round-off.
    """
    return max(norm_u_sq + norm_v_sq - 2.0 * dot_uv, 0.0)


def row_squared_distances(X, q) -> np.ndarray:
    """Squared distances from every row of X to q, computed row-wise.

    All exact-ranking paths share this kernel so that oracle comparisons are
    bit-identical.
    """
    X = np.asarray(X, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    diff = X - q
    return np.einsum("ij,ij->i", diff, diff)
