"""Ranked result lists, per-query cost counters, and retrieval metrics."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np


@dataclass
class QueryCounters:
    """Cost accounting for one query (or an aggregate over many).

    float_ops weights each distance computation by its dimensionality, which
    is the proxy used for CPU-cost comparisons across reduction levels;
    distance_comps is the raw count.
    """

    distance_comps: int = 0
    float_ops: int = 0
    clusters_visited: int = 0
    candidates_verified: int = 0
    pages_accessed: int = 0
    nodes_visited: int = 0
    wall_ms: float = 0.0

    def add(self, other: "QueryCounters") -> None:
        self.distance_comps += other.distance_comps
        self.float_ops += other.float_ops
        self.clusters_visited += other.clusters_visited
        self.candidates_verified += other.candidates_verified
        self.pages_accessed += other.pages_accessed
        self.nodes_visited += other.nodes_visited
        self.wall_ms += other.wall_ms


@dataclass
class ResultSet:
    """Neighbor ids and distances, ascending by (distance, id).

    distances are Euclidean, either in a cluster's retained subspace or in
    the original studentized space (see ``space``). ``truncated`` flags the
    k > M case where fewer than k entries could be returned.
    """

    ids: np.ndarray
    distances: np.ndarray
    k_requested: int
    space: str = "original"      # "original" | "subspace"
    truncated: bool = False
    counters: QueryCounters = field(default_factory=QueryCounters)

    def __len__(self) -> int:
        return int(self.ids.shape[0])


def make_result(ids, distances, k_requested: int, space: str,
                counters: QueryCounters | None = None, truncated: bool = False) -> ResultSet:
    """Sort entries by (distance, id) and wrap them up."""
    ids = np.asarray(ids, dtype=np.int64)
    distances = np.asarray(distances, dtype=np.float64)
    order = np.lexsort((ids, distances))
    return ResultSet(
        ids=ids[order],
        distances=distances[order],
        k_requested=k_requested,
        space=space,
        truncated=truncated,
        counters=counters if counters is not None else QueryCounters(),
    )


class KBest:
    """Bounded best-list ordered by (distance, id); the heap top is the worst.

    Ties on distance resolve toward the lower id everywhere, which is what
    makes index searches reproduce the scan oracle bit for bit.
    """

    def __init__(self, k: int):
        self.k = k
        self._heap: list[tuple[float, int]] = []  # (-d, -id)

    def worst(self) -> float:
        return -self._heap[0][0] if len(self._heap) == self.k else np.inf

    def offer(self, d: float, pid: int) -> None:
        if len(self._heap) < self.k:
            heapq.heappush(self._heap, (-d, -pid))
        else:
            worst_d, worst_id = -self._heap[0][0], -self._heap[0][1]
            if (d, pid) < (worst_d, worst_id):
                heapq.heapreplace(self._heap, (-d, -pid))

    def offer_many(self, dists: np.ndarray, ids: np.ndarray) -> None:
        cut = self.worst()
        if np.isfinite(cut):
            keep = dists <= cut
            dists, ids = dists[keep], ids[keep]
        for i in np.lexsort((ids, dists)):
            self.offer(float(dists[i]), int(ids[i]))

    def sorted_entries(self) -> list[tuple[float, int]]:
        return sorted((-d, -pid) for d, pid in self._heap)

    def __len__(self) -> int:
        return len(self._heap)


@dataclass
class RetrievalMetrics:
    """Precision/recall aggregates over a query batch.

    k_star = k * recall / precision is the candidate-list size that would be
    needed to reach the observed recall at the observed precision.
    """

    precision: float
    recall: float
    k_star: float
    queries_evaluated: int
    mean_distance_comps: float = 0.0
    mean_float_ops: float = 0.0
    mean_clusters_visited: float = 0.0
    mean_candidates_verified: float = 0.0
    mean_pages_accessed: float = 0.0
    wall_ms: float = 0.0
