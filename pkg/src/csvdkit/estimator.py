"""scikit-learn compatible front ends.

``Studentizer`` is a plain column scaler usable in sklearn pipelines;
``CsvdNearestNeighbors`` mirrors the NearestNeighbors API (fit/kneighbors/
radius_neighbors, get_params/set_params) on top of the clustered-SVD engine,
so the index drops into code written against the wider ecosystem.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import csvd as csvd_mod
from . import query as query_mod
from .errors import DataError
from .linalg import apply_studentization, studentize
from .validation import as_matrix


class Studentizer(BaseEstimator, TransformerMixin):
    """Scale each column to zero mean and unit sample standard deviation.

    Zero-variance columns transform to zeros (and are flagged) instead of
    being dropped, so downstream shapes stay stable.
    """

    def fit(self, X, y=None):
        fm = studentize(as_matrix(X))
        self.col_means_ = fm.col_means
        self.col_stds_ = fm.col_stds
        self.degenerate_ = fm.degenerate
        self.n_features_in_ = fm.n_features
        return self

    def transform(self, X):
        self._check_fitted()
        return apply_studentization(as_matrix(X), col_means=self.col_means_,
                                    col_stds=self.col_stds_, degenerate=self.degenerate_)

    def inverse_transform(self, Y):
        self._check_fitted()
        Y = as_matrix(Y, "Y")
        return Y * np.where(self.degenerate_, 0.0, self.col_stds_) + self.col_means_

    def _check_fitted(self):
        if not hasattr(self, "col_means_"):
            raise DataError("Studentizer is not fitted; call fit first")


class CsvdNearestNeighbors(BaseEstimator):
    """Nearest-neighbor search over a clustered-SVD index.

    Parameters
    ----------
    n_clusters : number of hypersphere clusters.
    objective : "nmse" (variance-loss target), "volume" (index size target),
        or "recall" (measured-recall target); ``target`` is its value.
    index : "scan" searches stored cluster points directly; "optree" builds
        an ordered-partition tree per cluster.
    fanout, leaf_capacity : tree shape knobs when index="optree".
    seeding : "lbg" binary splitting (default) or "furthest".
    random_state : seed for clustering and sampling.

    After ``fit``, ``kneighbors`` answers exact queries (identical to a
    sequential scan) or approximate ones measured in the reduced subspaces.
    """

    def __init__(self, n_clusters=1, objective="nmse", target=0.0, index="scan",
                 fanout=5, leaf_capacity=64, seeding="lbg", max_iters=50,
                 tol=1e-6, random_state=0):
        self.n_clusters = n_clusters
        self.objective = objective
        self.target = target
        self.index = index
        self.fanout = fanout
        self.leaf_capacity = leaf_capacity
        self.seeding = seeding
        self.max_iters = max_iters
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        if self.index not in ("scan", "optree"):
            raise DataError(f"unknown index type {self.index!r}")
        fm = studentize(as_matrix(X))
        model = csvd_mod.build_csvd(
            fm, self.n_clusters, self.objective, self.target,
            seeding=self.seeding, max_iters=self.max_iters, tol=self.tol,
            seed=self.random_state)
        if self.index == "optree":
            csvd_mod.attach_optrees(model, self.fanout, self.leaf_capacity)
        self.feature_matrix_ = fm
        self.model_ = model
        self.n_features_in_ = fm.n_features
        return self

    def kneighbors(self, X, n_neighbors=5, mode="exact", return_distance=True):
        """Neighbors of each query row; (distances, indices) arrays shaped
        (n_queries, n_neighbors), sklearn-style."""
        self._check_fitted()
        Q = self._queries(X)
        if n_neighbors > self.model_.n_points:
            raise DataError(
                f"n_neighbors={n_neighbors} exceeds the {self.model_.n_points} indexed points")
        dist = np.empty((Q.shape[0], n_neighbors))
        idx = np.empty((Q.shape[0], n_neighbors), dtype=np.int64)
        for i, q in enumerate(Q):
            res = self._query_one(q, n_neighbors, mode)
            dist[i] = res.distances
            idx[i] = res.ids
        return (dist, idx) if return_distance else idx

    def radius_neighbors(self, X, radius, return_distance=True):
        """Per query, the ids (and distances) of all points within radius,
        measured in the reduced subspaces."""
        self._check_fitted()
        Q = self._queries(X)
        all_ids = []
        all_dists = []
        for q in Q:
            res = query_mod.range_query_approx(self.model_, q, radius)
            all_ids.append(res.ids)
            all_dists.append(res.distances)
        return (all_dists, all_ids) if return_distance else all_ids

    def _query_one(self, q, k, mode):
        if mode == "exact":
            return query_mod.knn_exact(self.model_, self.feature_matrix_, q, k)
        if mode == "approx":
            return query_mod.knn_approx(self.model_, q, k)
        raise DataError(f"unknown query mode {mode!r}")

    def _queries(self, X):
        Q = np.asarray(X, dtype=np.float64)
        if Q.ndim == 1:
            Q = Q[None, :]
        if Q.ndim != 2 or Q.shape[1] != self.n_features_in_:
            raise DataError(
                f"queries must have {self.n_features_in_} features, got shape {Q.shape}")
        return Q

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise DataError("estimator is not fitted; call fit first")
