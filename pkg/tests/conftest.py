"""Shared fixtures and independent oracles.

The brute-force helpers here are deliberately written against raw numpy
(not the package's distance kernels) so index searches are checked against
an implementation that cannot share their bugs.
"""

import numpy as np
import pytest

from csvdkit import studentize
from csvdkit.datasets import gen_blobs, gen_lines

# Twelve integer points in 3-D: a small fixed workload whose k-NN answers
# are easy to verify by hand.
POINTS12 = np.array(
    [
        (1, 2, 5), (3, 8, 7), (9, 10, 8), (12, 9, 2),
        (8, 7, 20), (6, 6, 23), (0, 3, 27), (2, 13, 9),
        (11, 11, 15), (14, 17, 13), (7, 14, 12), (10, 12, 3),
    ],
    dtype=np.float64,
)


def brute_force_knn(X, q, k):
    """Independent oracle: full scan, ascending (distance, id)."""
    X = np.asarray(X, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    d = np.sqrt(((X - q) ** 2).sum(axis=1))
    order = np.lexsort((np.arange(len(X)), d))[:k]
    return order.astype(np.int64), d[order]


def brute_force_range(X, q, radius):
    """Independent oracle: ids of all points within radius (inclusive)."""
    X = np.asarray(X, dtype=np.float64)
    d = np.sqrt(((X - np.asarray(q, dtype=np.float64)) ** 2).sum(axis=1))
    return np.flatnonzero(d <= radius).astype(np.int64)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def blob_fm():
    """Two well-separated blobs, studentized; 300 points, 8-D."""
    data, labels = gen_blobs(300, 8, n_clusters=2, seed=3)
    return studentize(data), data, labels


@pytest.fixture
def lines_fm():
    """Three noisy line segments, studentized; 300 points, 3-D."""
    data, labels = gen_lines(300, 3, n_clusters=3, seed=5)
    return studentize(data), data, labels
