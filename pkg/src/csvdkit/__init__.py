"""Clustered-SVD similarity search.

Cluster a studentized feature table, rotate each cluster into its own eigen
frame, keep only the dimensions a global greedy allocation deems worth
their variance, and answer k-NN queries either approximately (subspace
branch-and-bound) or exactly (range-query verification against the original
rows). Two index structures accelerate within-cluster search: an in-memory
ordered-partition tree and a paged stepwise-dimensionality-increasing tree.
"""

from .clustering import Partition, cluster_stats, kmeans, lbg_seed
from .csvd import (ClusterEntry, CsvdModel, allocate_dimensions, attach_optrees,
                   attach_sditrees, build_csvd, index_volume, load_model,
                   nmse_clustered, nmse_clustered_data, project_query, save_model)
from .datasets import generate
from .errors import CsvdkitError, DataError, FormatError, NumericError
from .estimator import CsvdNearestNeighbors, Studentizer
from .linalg import (EigenSystem, FeatureMatrix, covariance, eigendecompose,
                     nmse_global, nmse_residual, rotate,
                     singular_values_from_eigenvalues, squared_distance,
                     squared_distance_from_norms, studentize)
from .optree import (OpTree, build_optree, deserialize_optree, load_optree,
                     optree_knn, optree_range, save_optree, serialize_optree)
from .query import (cluster_distance, evaluate, knn_approx, knn_exact, knn_scan,
                    range_query_approx)
from .results import QueryCounters, ResultSet, RetrievalMetrics
from .sditree import (DimensionSchedule, SdiTree, build_sdi, dimension_schedule,
                      entry_size, open_sdi, save_sdi, sdi_knn, sdi_range)

__version__ = "0.1.0"

__all__ = [
    "CsvdkitError", "DataError", "NumericError", "FormatError",
    "FeatureMatrix", "EigenSystem", "studentize", "covariance", "eigendecompose",
    "singular_values_from_eigenvalues", "rotate", "nmse_global", "nmse_residual",
    "squared_distance", "squared_distance_from_norms",
    "Partition", "kmeans", "lbg_seed", "cluster_stats",
    "ClusterEntry", "CsvdModel", "build_csvd", "allocate_dimensions",
    "index_volume", "nmse_clustered", "nmse_clustered_data", "project_query",
    "save_model", "load_model", "attach_optrees", "attach_sditrees",
    "ResultSet", "QueryCounters", "RetrievalMetrics",
    "knn_scan", "cluster_distance", "knn_approx", "range_query_approx",
    "knn_exact", "evaluate",
    "OpTree", "build_optree", "optree_knn", "optree_range",
    "serialize_optree", "deserialize_optree", "save_optree", "load_optree",
    "DimensionSchedule", "SdiTree", "dimension_schedule", "entry_size",
    "build_sdi", "sdi_knn", "sdi_range", "save_sdi", "open_sdi",
    "CsvdNearestNeighbors", "Studentizer",
    "generate",
]
