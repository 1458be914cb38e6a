"""Partitioning of the studentized dataset into H clusters.

Lloyd iterations over seeds produced either by binary-splitting vector
quantization (the default) or by a furthest-first sweep. Everything is
deterministic under a fixed seed; nearest-centroid ties break toward the
lower cluster id.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .linalg import row_squared_distances
from .validation import as_matrix

LBG_EPS_REL = 1e-3    # perturbation, relative to the split dimension's std
LBG_LLOYD_STEPS = 5   # refinement passes per split level


@dataclass
class Partition:
    """Cluster membership with exact per-cluster statistics.

    radii are tight: the farthest member of cluster h sits exactly at
    radii[h] from centroids[h].
    """

    assignments: np.ndarray        # (M,) int32 cluster ids
    centroids: np.ndarray          # (H, N)
    radii: np.ndarray              # (H,)
    sizes: np.ndarray              # (H,) int64
    converged: bool = True
    n_iter: int = 0
    inertia_history: list = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]


def _data_of(X) -> np.ndarray:
    return as_matrix(getattr(X, "data", X), "X")


def _assign(X: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centroid labels (ties -> lower id) and squared distances."""
    # ||x||^2 is constant per point, so argmin over the cross terms suffices;
    # keeping the full squared distance makes the repair step reusable.
    d2 = (
        np.einsum("ij,ij->i", X, X)[:, None]
        - 2.0 * (X @ centroids.T)
        + np.einsum("ij,ij->i", centroids, centroids)[None, :]
    )
    np.clip(d2, 0.0, None, out=d2)
    labels = np.argmin(d2, axis=1).astype(np.int32)
    return labels, d2


def _repair_empty(X, labels, d2, centroids):
    """Reseed each empty cluster at the point currently farthest from its centroid.

    Stealing a point can in principle empty a singleton cluster, so sweep
    until every cluster is populated (bounded by H sweeps).
    """
    h_all = centroids.shape[0]
    for _ in range(h_all):
        counts = np.bincount(labels, minlength=h_all)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            break
        taken = set()
        for h in empty:
            own = d2[np.arange(X.shape[0]), labels].copy()
            own[counts[labels] <= 1] = -1.0  # do not drain singletons
            for t in taken:
                own[t] = -1.0
            far = int(np.argmax(own))
            taken.add(far)
            centroids[h] = X[far]
            labels[far] = h
    return labels, centroids


def _lloyd(X, centroids, max_iters, tol):
    """Run Lloyd iterations; returns (labels, centroids, converged, iters, history)."""
    history = []
    converged = False
    labels = None
    it = 0
    for it in range(1, max_iters + 1):
        labels, d2 = _assign(X, centroids)
        labels, centroids = _repair_empty(X, labels, d2, centroids)
        history.append(float(d2[np.arange(X.shape[0]), labels].sum()))
        new_centroids = np.empty_like(centroids)
        for h in range(centroids.shape[0]):
            members = X[labels == h]
            # repair can leave a cluster transiently empty mid-sweep; keep the
            # old centroid and let the next assignment pass fix it
            new_centroids[h] = members.mean(axis=0) if members.shape[0] else centroids[h]
        movement = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if movement < tol:
            converged = True
            break
    labels, d2 = _assign(X, centroids)
    labels, centroids = _repair_empty(X, labels, d2, centroids)
    return labels, centroids, converged, it, history


def lbg_seed(X, n_seeds: int) -> np.ndarray:
    """Binary-splitting seeds: start from the global centroid and repeatedly
    split every centroid +/- epsilon along its members' highest-variance
    dimension, refining with a few Lloyd passes per level.

    Non-power-of-two targets are grown to the next power of two, then the
    best-populated seeds are kept.
    """
    X = _data_of(X)
    m = X.shape[0]
    if not 1 <= n_seeds <= m:
        raise DataError(f"need 1 <= seeds <= {m}, got {n_seeds}")
    levels = int(np.ceil(np.log2(n_seeds))) if n_seeds > 1 else 0
    centroids = X.mean(axis=0, keepdims=True)
    for _ in range(levels):
        labels, _ = _assign(X, centroids)
        split = []
        for h in range(centroids.shape[0]):
            members = X[labels == h]
            if members.shape[0] == 0:
                members = X
            variances = members.var(axis=0)
            dim = int(np.argmax(variances))
            eps = LBG_EPS_REL * float(np.sqrt(variances[dim]))
            if eps == 0.0:
                warnings.warn("degenerate data: binary-split seeds collapsed", stacklevel=2)
                eps = LBG_EPS_REL
            delta = np.zeros(X.shape[1])
            delta[dim] = eps
            split.append(centroids[h] + delta)
            split.append(centroids[h] - delta)
        centroids = np.asarray(split)
        _, centroids, _, _, _ = _lloyd(X, centroids, LBG_LLOYD_STEPS, 0.0)
    if centroids.shape[0] > n_seeds:
        labels, _ = _assign(X, centroids)
        counts = np.bincount(labels, minlength=centroids.shape[0])
        keep = np.argsort(-counts, kind="stable")[:n_seeds]
        centroids = centroids[np.sort(keep)]
    return centroids


def furthest_first_seed(X, n_seeds: int, seed: int = 0) -> np.ndarray:
    """Greedy max-min seeds: random first pick, then repeatedly the point
    farthest from its nearest chosen seed."""
    X = _data_of(X)
    m = X.shape[0]
    if not 1 <= n_seeds <= m:
        raise DataError(f"need 1 <= seeds <= {m}, got {n_seeds}")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(m))]
    mind2 = row_squared_distances(X, X[chosen[0]])
    while len(chosen) < n_seeds:
        nxt = int(np.argmax(mind2))
        chosen.append(nxt)
        np.minimum(mind2, row_squared_distances(X, X[nxt]), out=mind2)
    return X[np.asarray(chosen)].copy()


def kmeans(X, n_clusters: int, *, seeding: str = "lbg", max_iters: int = 50,
           tol: float = 1e-6, seed: int = 0) -> Partition:
    """Partition rows of X into n_clusters clusters.

    Iterates until the largest centroid movement drops below tol or
    max_iters is exhausted. Empty clusters are repaired by reseeding from
    the point farthest from its current centroid.
    """
    X = _data_of(X)
    m = X.shape[0]
    if not 1 <= n_clusters <= m:
        raise DataError(f"need 1 <= clusters <= {m} points, got {n_clusters}")
    if seeding == "lbg":
        seeds = lbg_seed(X, n_clusters)
    elif seeding == "furthest":
        seeds = furthest_first_seed(X, n_clusters, seed)
    else:
        raise DataError(f"unknown seeding strategy {seeding!r}")
    labels, centroids, converged, n_iter, history = _lloyd(X, seeds, max_iters, tol)
    part = cluster_stats(X, labels, n_clusters=n_clusters)
    part.converged = converged
    part.n_iter = n_iter
    part.inertia_history = history
    return part


def cluster_stats(X, assignments, n_clusters: int | None = None) -> Partition:
    """Recompute centroids, radii, and sizes exactly from a membership vector."""
    X = _data_of(X)
    labels = np.asarray(assignments, dtype=np.int32).ravel()
    if labels.shape[0] != X.shape[0]:
        raise DataError("assignments length does not match row count")
    h_all = int(labels.max()) + 1 if n_clusters is None else n_clusters
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= h_all:
        raise DataError("assignment ids out of range")
    centroids = np.empty((h_all, X.shape[1]))
    radii = np.empty(h_all)
    sizes = np.empty(h_all, dtype=np.int64)
    for h in range(h_all):
        members = X[labels == h]
        if members.shape[0] == 0:
            raise DataError(f"cluster {h} has no members")
        centroids[h] = members.mean(axis=0)
        radii[h] = float(np.sqrt(row_squared_distances(members, centroids[h]).max()))
        sizes[h] = members.shape[0]
    return Partition(assignments=labels, centroids=centroids, radii=radii, sizes=sizes)
