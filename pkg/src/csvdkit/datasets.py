"""Synthetic workloads: separated Gaussian blobs, noisy disjoint line
segments (one dominant direction per cluster), and a uniform box.

Generators are deterministic under a seed and also return the generating
labels so clustering recovery can be checked against ground truth.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError

KINDS = ("blobs", "lines", "uniform")


def gen_blobs(n_points: int, n_features: int, n_clusters: int = 3, seed: int = 0,
              separation: float = 10.0) -> tuple[np.ndarray, np.ndarray]:
    """Unit-variance Gaussian blobs with centers at least ``separation``
    apart (in units of the per-dimension noise std)."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_clusters, n_features))
    if n_clusters > 1:
        d = np.sqrt(((centers[:, None, :] - centers[None, :, :]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        centers *= separation / d.min()
    labels = np.arange(n_points) % n_clusters
    data = centers[labels] + rng.normal(size=(n_points, n_features))
    return data, labels.astype(np.int64)


def gen_lines(n_points: int, n_features: int, n_clusters: int = 3, seed: int = 0,
              length: float = 20.0, noise: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Points on disjoint line segments plus isotropic noise.

    At the default noise level each cluster's leading eigenvalue carries
    over 99% of its variance, so a one-dimensional frame per cluster is
    nearly lossless.
    """
    if n_features < 2:
        raise DataError("line segments need at least 2 dimensions")
    rng = np.random.default_rng(seed)
    anchors = rng.normal(size=(n_clusters, n_features))
    if n_clusters > 1:
        d = np.sqrt(((anchors[:, None, :] - anchors[None, :, :]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        anchors *= (3.0 * length) / d.min()  # keep segments well clear of each other
    directions = rng.normal(size=(n_clusters, n_features))
    directions /= np.sqrt((directions ** 2).sum(axis=1, keepdims=True))
    labels = np.arange(n_points) % n_clusters
    t = rng.uniform(-length / 2.0, length / 2.0, size=n_points)
    data = anchors[labels] + t[:, None] * directions[labels]
    data += noise * rng.normal(size=(n_points, n_features))
    return data, labels.astype(np.int64)


def gen_uniform(n_points: int, n_features: int, seed: int = 0,
                low: float = -1.0, high: float = 1.0) -> tuple[np.ndarray, None]:
    rng = np.random.default_rng(seed)
    return rng.uniform(low, high, size=(n_points, n_features)), None


def generate(kind: str, n_points: int, n_features: int, n_clusters: int = 3,
             seed: int = 0, **kwargs):
    """Dispatch by kind; returns (data, labels-or-None)."""
    if kind == "blobs":
        return gen_blobs(n_points, n_features, n_clusters, seed, **kwargs)
    if kind == "lines":
        return gen_lines(n_points, n_features, n_clusters, seed, **kwargs)
    if kind == "uniform":
        return gen_uniform(n_points, n_features, seed, **kwargs)
    raise DataError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
