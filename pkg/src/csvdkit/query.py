"""k-NN query processing over a clustered-SVD model.

Approximate search is branch-and-bound across cluster hyperspheres: the
closest-centroid cluster is searched first, remaining clusters in ascending
order of their hypersphere lower bound, stopping at the first bound beyond
the running k-th distance. Exact search wraps the approximate result in a
range query whose radius is the verified k-th original distance; because
subspace distances never exceed original distances, that range query cannot
dismiss a true neighbor, and re-ranking the candidates by original distance
reproduces the sequential scan exactly.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import optree as optree_mod
from .csvd import ClusterEntry, CsvdModel, lower_bound_to_cluster, studentize_query
from .errors import DataError
from .linalg import FeatureMatrix, apply_studentization, row_squared_distances
from .results import KBest, QueryCounters, ResultSet, RetrievalMetrics, make_result

# Absolute slack added to exact-search range radii: float32 point storage can
# push a subspace distance this far past the original-space distance.
LBP_SLACK = 1e-4


def knn_scan(X, q, k: int) -> ResultSet:
    """Ground-truth oracle: exact k-NN by scanning every row.

    X may be a FeatureMatrix (q is then raw and studentized with its stats)
    or a plain matrix in which case q must already live in the same space.
    """
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if isinstance(X, FeatureMatrix):
        data = X.data
        q = apply_studentization(q, X)
    else:
        data = np.asarray(X, dtype=np.float64)
        q = np.asarray(q, dtype=np.float64).ravel()
    if q.shape[0] != data.shape[1]:
        raise DataError(f"query has {q.shape[0]} features, expected {data.shape[1]}")
    m = data.shape[0]
    counters = QueryCounters(distance_comps=m, float_ops=m * data.shape[1])
    d = np.sqrt(row_squared_distances(data, q))
    order = np.lexsort((np.arange(m), d))[:k]
    return ResultSet(ids=order.astype(np.int64), distances=d[order], k_requested=k,
                     space="original", truncated=m < k, counters=counters)


def cluster_distance(q_studentized, entry: ClusterEntry) -> float:
    """Lower bound from a preprocessed query to any member of the cluster."""
    return lower_bound_to_cluster(np.asarray(q_studentized, dtype=np.float64), entry)


def _project(q_st: np.ndarray, entry: ClusterEntry) -> np.ndarray:
    """Project into the cluster frame, quantized to the stored points'
    float32 grid so subspace distances are symmetric in precision (a stored
    point queries back to itself at distance zero)."""
    q_h = (q_st - entry.centroid) @ entry.basis
    return q_h.astype(np.float32).astype(np.float64)


def _subspace_distances(entry: ClusterEntry, q_h: np.ndarray, counters: QueryCounters) -> np.ndarray:
    """Distances from the projected query to every stored row, via the
    precomputed-norms inner-product form."""
    if entry.retained == 0:
        counters.distance_comps += entry.size
        return np.zeros(entry.size)
    d2 = entry.point_norms + float(q_h @ q_h) - 2.0 * (entry.points @ q_h)
    np.clip(d2, 0.0, None, out=d2)
    counters.distance_comps += entry.size
    counters.float_ops += entry.size * entry.retained
    return np.sqrt(d2)


def _cluster_order(model: CsvdModel, q_st: np.ndarray):
    """Primary cluster (closest centroid) first, the rest by ascending
    hypersphere bound, ties toward the lower id."""
    centroid_d = np.array([
        np.sqrt(row_squared_distances(e.centroid[None, :], q_st)[0]) for e in model.clusters])
    bounds = np.array([max(float(centroid_d[h]) - model.clusters[h].radius, 0.0)
                       for h in range(model.n_clusters)])
    primary = int(np.argmin(centroid_d))
    rest = [h for h in range(model.n_clusters) if h != primary]
    rest.sort(key=lambda h: (bounds[h], h))
    return [primary] + rest, bounds


def knn_approx(model: CsvdModel, q_raw, k: int) -> ResultSet:
    """Approximate k-NN: branch-and-bound over clusters, distances measured
    in each visited cluster's retained subspace."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if model.n_clusters == 0:
        raise DataError("model has no clusters")
    q_st = studentize_query(q_raw, model)
    order, bounds = _cluster_order(model, q_st)
    counters = QueryCounters()
    best = KBest(k)
    for rank, h in enumerate(order):
        if rank > 0 and len(best) == k and bounds[h] > best.worst():
            break  # remaining clusters are sorted: nothing closer remains
        entry = model.clusters[h]
        counters.clusters_visited += 1
        q_h = _project(q_st, entry)
        optree = model.optrees[h] if model.optrees is not None else None
        sditree = model.sditrees[h] if model.sditrees is not None else None
        if optree is not None:
            d_init = best.worst()
            sub = optree_mod.optree_knn(optree, q_h, k,
                                        d_init=None if np.isinf(d_init) else d_init)
            counters.add(sub.counters)
            best.offer_many(sub.distances, sub.ids)
        elif sditree is not None:
            from . import sditree as sditree_mod

            sub = sditree_mod.sdi_knn(sditree, q_h, min(k, entry.size))
            counters.add(sub.counters)
            best.offer_many(sub.distances, sub.ids)
        else:
            d = _subspace_distances(entry, q_h, counters)
            best.offer_many(d, entry.ids)
    entries = best.sorted_entries()
    ids = np.asarray([e[1] for e in entries], dtype=np.int64)
    dists = np.asarray([e[0] for e in entries])
    return ResultSet(ids=ids, distances=dists, k_requested=k, space="subspace",
                     truncated=len(entries) < k, counters=counters)


def range_query_approx(model: CsvdModel, q_raw, radius: float) -> ResultSet:
    """Every stored point whose subspace distance is <= radius.

    Clusters whose hypersphere bound exceeds the radius are pruned; within a
    cluster the subspace distance lower-bounds the original distance, so the
    result is a superset of the original-space range result.
    """
    if radius < 0:
        raise DataError(f"radius must be >= 0, got {radius}")
    q_st = studentize_query(q_raw, model)
    counters = QueryCounters()
    all_ids: list[np.ndarray] = []
    all_d: list[np.ndarray] = []
    for h, entry in enumerate(model.clusters):
        if lower_bound_to_cluster(q_st, entry) > radius:
            continue
        counters.clusters_visited += 1
        q_h = _project(q_st, entry)
        optree = model.optrees[h] if model.optrees is not None else None
        sditree = model.sditrees[h] if model.sditrees is not None else None
        if optree is not None:
            sub = optree_mod.optree_range(optree, q_h, radius)
            counters.add(sub.counters)
            all_ids.append(sub.ids)
            all_d.append(sub.distances)
        elif sditree is not None:
            from . import sditree as sditree_mod

            sub = sditree_mod.sdi_range(sditree, q_h, radius)
            counters.add(sub.counters)
            all_ids.append(sub.ids)
            all_d.append(sub.distances)
        else:
            d = _subspace_distances(entry, q_h, counters)
            inside = d <= radius
            all_ids.append(entry.ids[inside])
            all_d.append(d[inside])
    ids = np.concatenate(all_ids) if all_ids else np.empty(0, dtype=np.int64)
    d = np.concatenate(all_d) if all_d else np.empty(0)
    return make_result(ids, d, max(len(ids), 1), "subspace", counters)


def knn_exact(model: CsvdModel, X: FeatureMatrix, q_raw, k: int, *,
              lbp_slack: float = LBP_SLACK, shrink: bool = False) -> ResultSet:
    """Exact k-NN through the reduced index, verified against original rows.

    1. approximate k-NN in the subspaces;
    2. original distances of those ids fix the verified radius d_max;
    3. subspace range query at d_max (plus storage slack) collects every
       candidate that could possibly rank among the true top k;
    4. candidates are re-ranked by original distance.

    ``shrink`` verifies candidates in ascending subspace order and stops
    once the subspace distance alone rules the rest out; default off, which
    keeps the literal fixed-radius behavior.
    """
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    q_st = apply_studentization(q_raw, X)
    counters = QueryCounters()

    step1 = knn_approx(model, q_raw, k)
    counters.add(step1.counters)

    d_orig_1 = np.sqrt(row_squared_distances(X.data[step1.ids], q_st))
    counters.distance_comps += len(step1.ids)
    counters.float_ops += len(step1.ids) * X.n_features
    counters.candidates_verified += len(step1.ids)
    d_max = float(d_orig_1.max(initial=0.0))

    step3 = range_query_approx(model, q_raw, d_max + lbp_slack)
    counters.add(step3.counters)

    cand_ids = step3.ids
    cand_sub = step3.distances
    if shrink and len(cand_ids) > k:
        best = KBest(k)
        verified = 0
        for i in range(len(cand_ids)):
            if len(best) == k and cand_sub[i] > best.worst() + lbp_slack:
                break  # subspace distance already exceeds the running k-th
            d = float(np.sqrt(row_squared_distances(
                X.data[cand_ids[i]][None, :], q_st)[0]))
            verified += 1
            best.offer(d, int(cand_ids[i]))
        counters.distance_comps += verified
        counters.float_ops += verified * X.n_features
        counters.candidates_verified += verified
        entries = best.sorted_entries()
        ids = np.asarray([e[1] for e in entries], dtype=np.int64)
        dists = np.asarray([e[0] for e in entries])
    else:
        d_orig = np.sqrt(row_squared_distances(X.data[cand_ids], q_st))
        counters.distance_comps += len(cand_ids)
        counters.float_ops += len(cand_ids) * X.n_features
        counters.candidates_verified += len(cand_ids)
        order = np.lexsort((cand_ids, d_orig))[:k]
        ids = cand_ids[order]
        dists = d_orig[order]
    return ResultSet(ids=ids, distances=dists, k_requested=k, space="original",
                     truncated=len(ids) < k, counters=counters)


# ---------------------------------------------------------------------------
# batch evaluation
# ---------------------------------------------------------------------------

def _find_candidate_size(model, X, queries, k, target_recall) -> int:
    """Smallest candidate-list size whose pilot recall reaches the target:
    double from k, then binary-search the gap."""
    pilot = queries[: min(50, len(queries))]
    truth = [set(knn_scan(X, q, k).ids.tolist()) for q in pilot]

    def recall_at(size: int) -> float:
        hits = sum(len(truth[i] & set(knn_approx(model, q, size).ids.tolist()))
                   for i, q in enumerate(pilot))
        return hits / (len(pilot) * k)

    size = k
    while recall_at(size) < target_recall and size < X.n_points:
        size = min(size * 2, X.n_points)
    lo, hi = max(k, size // 2), size
    while lo < hi:
        mid = (lo + hi) // 2
        if recall_at(mid) >= target_recall:
            hi = mid
        else:
            lo = mid + 1
    return hi


def evaluate(model: CsvdModel, X: FeatureMatrix, queries, k: int,
             mode: str = "exact", *, k_prime: int | None = None,
             target_recall: float | None = None, threads: int = 1) -> RetrievalMetrics:
    """Precision/recall/k* of a query batch against the scan oracle, plus
    aggregated cost counters.

    In approximate mode the candidate list holds ``k_prime`` entries
    (defaults to k; with ``target_recall`` set, a pilot run sizes it to the
    smallest list reaching that recall).
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[0] < 1:
        raise DataError("need at least one query")
    if mode not in ("exact", "approx"):
        raise DataError(f"unknown mode {mode!r}")
    if mode == "approx" and k_prime is None:
        k_prime = (_find_candidate_size(model, X, queries, k, target_recall)
                   if target_recall is not None else k)

    def one(q):
        truth = knn_scan(X, q, k)
        a = set(truth.ids.tolist())
        if mode == "exact":
            res = knn_exact(model, X, q, k)
        else:
            res = knn_approx(model, q, k_prime)
        b = set(res.ids.tolist())
        c = len(a & b)
        return c / max(len(b), 1), c / min(k, X.n_points), res.counters

    t0 = time.perf_counter()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, queries))
    else:
        rows = [one(q) for q in queries]
    wall_ms = (time.perf_counter() - t0) * 1000.0

    nq = len(rows)
    precision = float(np.mean([r[0] for r in rows]))
    recall = float(np.mean([r[1] for r in rows]))
    k_star = k * recall / precision if precision > 0 else float("nan")
    agg = QueryCounters()
    for _, _, c in rows:
        agg.add(c)
    return RetrievalMetrics(
        precision=precision, recall=recall, k_star=k_star, queries_evaluated=nq,
        mean_distance_comps=agg.distance_comps / nq,
        mean_float_ops=agg.float_ops / nq,
        mean_clusters_visited=agg.clusters_visited / nq,
        mean_candidates_verified=agg.candidates_verified / nq,
        mean_pages_accessed=agg.pages_accessed / nq,
        wall_ms=wall_ms)
