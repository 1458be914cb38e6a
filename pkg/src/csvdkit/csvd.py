"""Clustered-SVD model: per-cluster rotation into eigen coordinates, a
global greedy dimension allocation driven by an objective (variance-loss
target, index-volume target, or recall target), and model persistence.

Stored cluster coordinates are float32 (halving index volume at ~1e-7
relative noise); every build computation stays float64.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import optree as optree_mod
from .clustering import kmeans
from .errors import DataError, FormatError, NumericError
from .formats import iter_sections, pack_section
from .linalg import (FeatureMatrix, apply_studentization, covariance,
                     eigendecompose, rotate, row_squared_distances)
from .validation import as_vector

MODEL_MAGIC = b"CSVD"
MODEL_FORMAT = 1

OBJECTIVES = ("nmse", "volume", "recall")
_OBJECTIVE_CODES = {"nmse": 0, "volume": 1, "recall": 2}
_OBJECTIVE_NAMES = {v: k for k, v in _OBJECTIVE_CODES.items()}

# Coarse-to-fine targets tried by the recall objective before giving up and
# keeping everything.
RECALL_SEARCH_GRID = (0.5, 0.4, 0.3, 0.2, 0.15, 0.1, 0.05, 0.02, 0.01, 0.0)
RECALL_SAMPLE_QUERIES = 200
RECALL_SAMPLE_K = 20


@dataclass
class ClusterEntry:
    """One cluster: hypersphere summary, spectral frame, and stored points.

    basis holds the first ``retained`` eigenvector columns; the full
    eigenvalue spectrum is kept so allocations can be re-derived without a
    rebuild. ids map stored rows back to original dataset rows.
    """

    centroid: np.ndarray       # (N,)
    radius: float
    basis: np.ndarray          # (N, p) float64, orthonormal columns
    eigenvalues: np.ndarray    # (N,) full spectrum, nonincreasing
    points: np.ndarray         # (m, p) float32 projected coordinates
    ids: np.ndarray            # (m,) int64 original row ids
    point_norms: np.ndarray    # (m,) float64 squared norms of stored rows

    @property
    def retained(self) -> int:
        return self.basis.shape[1]

    @property
    def size(self) -> int:
        return self.ids.shape[0]


@dataclass
class CsvdModel:
    clusters: list
    n_features: int
    n_points: int
    objective: str
    target: float
    achieved_nmse: float
    index_volume: int
    col_means: np.ndarray
    col_stds: np.ndarray
    degenerate: np.ndarray
    optrees: list | None = field(default=None, repr=False)
    sditrees: list | None = field(default=None, repr=False)

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)


def _check_spectra(spectra) -> list[np.ndarray]:
    out = []
    for h, lam in enumerate(spectra):
        arr = as_vector(lam, name=f"spectrum[{h}]")
        if np.any(np.diff(arr) > 1e-12 * max(1.0, float(arr.max(initial=0.0)))):
            raise DataError(f"spectrum[{h}] is not sorted nonincreasing")
        out.append(arr)
    return out


def allocate_dimensions(spectra, sizes, objective: str, target: float) -> np.ndarray:
    """Choose how many rotated dimensions each cluster keeps.

    All (eigenvalue * cluster_size) products are merged into one ascending
    list and discarded greedily from the cheap end; because each spectrum is
    nonincreasing, the dimension discarded from a cluster is always its
    currently-last retained one. Stopping rules:

      nmse:   discard while the variance-loss fraction stays <= target;
      volume: discard until the index volume drops to <= target.

    The recall objective is resolved by ``build_csvd`` (it needs measured
    recall on sample queries, not just spectra).
    """
    spectra = _check_spectra(spectra)
    sizes = np.asarray(sizes, dtype=np.int64).ravel()
    if sizes.shape[0] != len(spectra) or np.any(sizes < 1):
        raise DataError("sizes must hold one positive count per cluster")
    if objective == "recall":
        raise DataError("recall objective requires measured queries; use build_csvd")
    if objective not in OBJECTIVES:
        raise DataError(f"unknown objective {objective!r}")

    items = []  # (product, cluster, dim); dim descending on ties keeps truncation contiguous
    for h, lam in enumerate(spectra):
        for i in range(lam.shape[0]):
            items.append((float(lam[i]) * int(sizes[h]), h, -i))
    items.sort()

    retained = np.asarray([lam.shape[0] for lam in spectra], dtype=np.int64)
    if objective == "nmse":
        denom = float(sum(int(m) * float(lam.sum()) for m, lam in zip(sizes, spectra)))
        if denom <= 0.0:
            raise NumericError("all clusters have zero variance; loss fraction undefined")
        discarded = 0.0
        for product, h, _ in items:
            if (discarded + product) / denom > target:
                break
            discarded += product
            retained[h] -= 1
    else:  # volume
        n = spectra[0].shape[0]
        h_all = len(spectra)
        floor_volume = n * h_all  # centroids remain even with nothing retained
        if target < floor_volume:
            raise DataError(
                f"volume target {target:g} is below the centroid overhead {floor_volume}")
        volume = floor_volume + int(sum(n * retained[h] + sizes[h] * retained[h]
                                        for h in range(h_all)))
        for product, h, _ in items:
            if volume <= target:
                break
            volume -= n + int(sizes[h])
            retained[h] -= 1
    return retained


def index_volume(model: CsvdModel) -> int:
    """Value count of the index: N*H centroids plus, per cluster, the N*p
    projection matrix and the m*p projected points."""
    n, h_all = model.n_features, model.n_clusters
    return int(n * h_all + sum(n * e.retained + e.size * e.retained for e in model.clusters))


def nmse_clustered(model: CsvdModel) -> float:
    """Size-weighted variance-loss fraction from the stored spectra."""
    num = 0.0
    den = 0.0
    for e in model.clusters:
        num += e.size * float(e.eigenvalues[e.retained:].sum())
        den += e.size * float(e.eigenvalues.sum())
    if den <= 0.0:
        raise NumericError("zero total variance")
    return num / den


def nmse_clustered_data(model: CsvdModel, fm: FeatureMatrix) -> float:
    """Data-side variance loss recomputed from the stored float32 points.

    The rotation is an isometry, so the discarded energy of a row equals its
    centered squared norm minus the stored row's squared norm; agreement
    with ``nmse_clustered`` is limited only by float32 storage noise.
    """
    num = 0.0
    den = 0.0
    for e in model.clusters:
        centered = fm.data[e.ids] - e.centroid
        full = np.einsum("ij,ij->i", centered, centered)
        kept = e.point_norms
        num += float(np.clip(full - kept, 0.0, None).sum())
        den += float(full.sum())
    if den <= 0.0:
        raise NumericError("zero total variance")
    return num / den


def project_query(q_raw, model: CsvdModel, h: int) -> np.ndarray:
    """Preprocess a raw query into cluster h's retained subspace."""
    q = apply_studentization(q_raw, col_means=model.col_means,
                             col_stds=model.col_stds, degenerate=model.degenerate)
    entry = model.clusters[h]
    return (q - entry.centroid) @ entry.basis


def studentize_query(q_raw, model: CsvdModel) -> np.ndarray:
    return apply_studentization(q_raw, col_means=model.col_means,
                                col_stds=model.col_stds, degenerate=model.degenerate)


def _assemble(fm: FeatureMatrix, part, eigensystems, rotations, retained,
              objective, target) -> CsvdModel:
    clusters = []
    for h in range(part.n_clusters):
        member_ids = np.flatnonzero(part.assignments == h).astype(np.int64)
        p = int(retained[h])
        pts32 = np.ascontiguousarray(rotations[h][:, :p], dtype=np.float32)
        pts64 = pts32.astype(np.float64)
        clusters.append(ClusterEntry(
            centroid=part.centroids[h].copy(),
            radius=float(part.radii[h]),
            basis=np.ascontiguousarray(eigensystems[h].eigenvectors[:, :p]),
            eigenvalues=eigensystems[h].eigenvalues.copy(),
            points=pts32,
            ids=member_ids,
            point_norms=np.einsum("ij,ij->i", pts64, pts64),
        ))
    model = CsvdModel(
        clusters=clusters,
        n_features=fm.n_features,
        n_points=fm.n_points,
        objective=objective,
        target=float(target),
        achieved_nmse=0.0,
        index_volume=0,
        col_means=fm.col_means.copy(),
        col_stds=fm.col_stds.copy(),
        degenerate=fm.degenerate.copy(),
    )
    model.achieved_nmse = nmse_clustered(model)
    model.index_volume = index_volume(model)
    return model


def build_csvd(fm: FeatureMatrix, n_clusters: int, objective: str = "nmse",
               target: float = 0.0, *, seeding: str = "lbg", max_iters: int = 50,
               tol: float = 1e-6, seed: int = 0,
               recall_sample: int = RECALL_SAMPLE_QUERIES,
               recall_k: int = RECALL_SAMPLE_K) -> CsvdModel:
    """Cluster, rotate each cluster into its eigen frame, and allocate
    retained dimensions against the objective.

    The recall objective walks coarse-to-fine variance-loss targets and
    keeps the coarsest model whose measured sample recall meets the target.
    """
    if objective not in OBJECTIVES:
        raise DataError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")
    part = kmeans(fm.data, n_clusters, seeding=seeding, max_iters=max_iters, tol=tol, seed=seed)

    eigensystems = []
    rotations = []
    for h in range(part.n_clusters):
        members = fm.data[part.assignments == h]
        centered = members - part.centroids[h]
        eig = eigendecompose(covariance(centered))
        eigensystems.append(eig)
        rotations.append(rotate(centered, eig.eigenvectors))
    spectra = [e.eigenvalues for e in eigensystems]

    if objective == "recall":
        from .query import knn_approx, knn_scan  # deferred: query builds on this module

        rng = np.random.default_rng(seed)
        n_sample = min(recall_sample, fm.n_points)
        sample = rng.choice(fm.n_points, size=n_sample, replace=False)
        k = min(recall_k, fm.n_points)
        raw = fm.data[sample] * np.where(fm.degenerate, 0.0, fm.col_stds) + fm.col_means
        truth = [set(knn_scan(fm, raw[i], k).ids.tolist()) for i in range(n_sample)]
        model = None
        for nmse_t in RECALL_SEARCH_GRID:
            retained = allocate_dimensions(spectra, part.sizes, "nmse", nmse_t)
            model = _assemble(fm, part, eigensystems, rotations, retained, "recall", target)
            hits = sum(len(truth[i] & set(knn_approx(model, raw[i], k).ids.tolist()))
                       for i in range(n_sample))
            if hits / (n_sample * k) >= target:
                break
        return model

    retained = allocate_dimensions(spectra, part.sizes, objective, target)
    return _assemble(fm, part, eigensystems, rotations, retained, objective, target)


def attach_optrees(model: CsvdModel, fanout: int = optree_mod.DEFAULT_FANOUT,
                   leaf_capacity: int = optree_mod.DEFAULT_LEAF_CAPACITY) -> CsvdModel:
    """Build one ordered-partition tree per cluster over its stored points.

    Columns of the stored points already come in nonincreasing-eigenvalue
    order, so the trees use the natural dimension priority. Clusters with no
    retained dimensions fall back to scans.
    """
    trees = []
    for e in model.clusters:
        if e.retained == 0:
            trees.append(None)
            continue
        trees.append(optree_mod.build_optree(
            e.points.astype(np.float64), ids=e.ids, fanout=fanout, leaf_capacity=leaf_capacity))
    model.optrees = trees
    return model


def attach_sditrees(model: CsvdModel, variance_step: float = 0.25,
                    page_size: int = 4096, seed: int = 0) -> CsvdModel:
    """Build one paged stepwise-dimensionality tree per cluster over its
    stored points, scheduled by the cluster's retained spectrum.

    With a single full-rank cluster this is the whole-dataset wiring: one
    tree over the globally rotated points.
    """
    from . import sditree as sditree_mod  # local import keeps module load light

    trees = []
    for e in model.clusters:
        if e.retained == 0 or e.size < 1:
            trees.append(None)
            continue
        lam = e.eigenvalues[:e.retained]
        if float(lam.sum()) <= 0.0:
            trees.append(None)
            continue
        trees.append(sditree_mod.build_sdi(
            e.points.astype(np.float64), ids=e.ids, eigenvalues=lam,
            variance_step=variance_step, page_size=page_size, seed=seed))
    model.sditrees = trees
    return model


# ---------------------------------------------------------------------------
# persistence
#
# The file starts with the model block:
#   header {magic "CSVD", format u32, M u64, N u32, H u32, objective u8,
#           target f64}
#   per-cluster blocks {m u64, p u32, centroid f64[N], radius f64,
#           eigenvalues f64[N], basis f64[N*p] row-major, ids u64[m],
#           points f32[m*p]}
#   CRC-32 u32 of the concatenated cluster blocks.
# Extension sections follow: "STAT" carries the studentization statistics a
# query-time preprocessor needs; "OPTR" sections embed per-cluster tree
# images. Readers skip tags they do not know.
# ---------------------------------------------------------------------------

_MODEL_HEADER = struct.Struct("<4sIQIIBd")
_CLUSTER_HEAD = struct.Struct("<QI")


def _model_block(model: CsvdModel) -> bytes:
    header = _MODEL_HEADER.pack(
        MODEL_MAGIC, MODEL_FORMAT, model.n_points, model.n_features,
        model.n_clusters, _OBJECTIVE_CODES[model.objective], model.target)
    body = bytearray()
    for e in model.clusters:
        body += _CLUSTER_HEAD.pack(e.size, e.retained)
        body += np.ascontiguousarray(e.centroid, dtype="<f8").tobytes()
        body += struct.pack("<d", e.radius)
        body += np.ascontiguousarray(e.eigenvalues, dtype="<f8").tobytes()
        body += np.ascontiguousarray(e.basis, dtype="<f8").tobytes()
        body += e.ids.astype("<u8").tobytes()
        body += np.ascontiguousarray(e.points, dtype="<f4").tobytes()
    return header + bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))


def save_model(model: CsvdModel, path) -> None:
    out = bytearray(_model_block(model))
    stat = (np.ascontiguousarray(model.col_means, dtype="<f8").tobytes()
            + np.ascontiguousarray(model.col_stds, dtype="<f8").tobytes()
            + model.degenerate.astype("<u1").tobytes())
    out += pack_section(b"STAT", stat)
    if model.optrees is not None:
        for h, tree in enumerate(model.optrees):
            if tree is None:
                continue
            out += pack_section(b"OPTR", struct.pack("<I", h) + optree_mod.serialize_optree(tree))
    with open(path, "wb") as f:
        f.write(out)


def load_model(path) -> CsvdModel:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _MODEL_HEADER.size:
        raise FormatError(f"{path}: truncated model file")
    magic, fmt, m_total, n, h_all, obj_code, target = _MODEL_HEADER.unpack_from(buf, 0)
    if magic != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    if fmt != MODEL_FORMAT:
        raise FormatError(f"{path}: unsupported model format {fmt}")
    if obj_code not in _OBJECTIVE_NAMES:
        raise FormatError(f"{path}: unknown objective code {obj_code}")

    pos = _MODEL_HEADER.size
    body_start = pos
    clusters = []
    try:
        for _ in range(h_all):
            m, p = _CLUSTER_HEAD.unpack_from(buf, pos)
            pos += _CLUSTER_HEAD.size
            centroid = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).copy()
            pos += 8 * n
            (radius,) = struct.unpack_from("<d", buf, pos)
            pos += 8
            eigenvalues = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).copy()
            pos += 8 * n
            basis = np.frombuffer(buf, dtype="<f8", count=n * p, offset=pos).reshape(n, p).copy()
            pos += 8 * n * p
            ids = np.frombuffer(buf, dtype="<u8", count=m, offset=pos).astype(np.int64)
            pos += 8 * m
            points = np.frombuffer(buf, dtype="<f4", count=m * p, offset=pos).reshape(m, p).copy()
            pos += 4 * m * p
            pts64 = points.astype(np.float64)
            clusters.append(ClusterEntry(
                centroid=centroid, radius=radius, basis=basis, eigenvalues=eigenvalues,
                points=points, ids=ids,
                point_norms=np.einsum("ij,ij->i", pts64, pts64)))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated cluster block") from exc
    if pos + 4 > len(buf):
        raise FormatError(f"{path}: missing model CRC")
    (crc,) = struct.unpack_from("<I", buf, pos)
    if zlib.crc32(buf[body_start:pos]) != crc:
        raise FormatError(f"{path}: model body CRC mismatch")
    pos += 4

    col_means = np.zeros(n)
    col_stds = np.ones(n)
    degenerate = np.zeros(n, dtype=bool)
    optrees: list = [None] * h_all
    have_trees = False
    for tag, payload in iter_sections(buf, pos):
        if tag == b"STAT":
            col_means = np.frombuffer(payload, dtype="<f8", count=n, offset=0).copy()
            col_stds = np.frombuffer(payload, dtype="<f8", count=n, offset=8 * n).copy()
            degenerate = np.frombuffer(payload, dtype="<u1", count=n, offset=16 * n).astype(bool)
        elif tag == b"OPTR":
            (h,) = struct.unpack_from("<I", payload, 0)
            optrees[h] = optree_mod.deserialize_optree(payload[4:])
            have_trees = True

    model = CsvdModel(
        clusters=clusters, n_features=n, n_points=m_total,
        objective=_OBJECTIVE_NAMES[obj_code], target=target,
        achieved_nmse=0.0, index_volume=0,
        col_means=col_means, col_stds=col_stds, degenerate=degenerate,
        optrees=optrees if have_trees else None)
    model.achieved_nmse = nmse_clustered(model)
    model.index_volume = index_volume(model)
    return model


def lower_bound_to_cluster(q_studentized, entry: ClusterEntry) -> float:
    """Distance from q to the cluster hypersphere: max(||q - centroid|| - R, 0)."""
    d = float(np.sqrt(row_squared_distances(entry.centroid[None, :], q_studentized)[0]))
    return max(d - entry.radius, 0.0)
