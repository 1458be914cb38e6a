"""Stepwise-dimensionality-increasing tree: a paged hypersphere index whose
nodes use more leading rotated dimensions the deeper they sit.

The per-level dimension counts follow the cumulative-variance rule: level l
keeps the fewest leading dimensions capturing at least min(l*p, 1) of the
total variance (and at least one more than the level above, so the schedule
strictly increases until it reaches the full dimensionality at the leaves).

Each node corresponds to one fixed-size page. An internal node at level l
stores, per child, a page reference plus the child's hypersphere summarized
in the level's n_l dimensions, so children are pruned before their pages are
ever read; leaves store (id, full vector) records. Distances over the first
n_l coordinates of an isometric rotation lower-bound full distances, which
is what makes best-first search over these bounds exact.
"""

from __future__ import annotations

import heapq
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .clustering import kmeans
from .errors import DataError, FormatError
from .linalg import row_squared_distances
from .results import KBest, QueryCounters, ResultSet
from .validation import as_matrix, as_vector

SDI_MAGIC = b"SDI1"
SDI_VERSION = 1
DEFAULT_PAGE_SIZE = 4096

_NODE_INTERNAL = 0
_NODE_LEAF = 1
# Node page prefix: kind u8, pad u8, level u16, count u32, radius f64,
# then the node's own center f64[n_own], then the entry array.
_NODE_FIXED = struct.Struct("<BBHId")
_HEADER_FIXED = struct.Struct("<4sIIQdII")  # magic, version, N, M, p, S, depth


@dataclass
class DimensionSchedule:
    """Dimensions used at each tree level; strictly increasing, ends at N."""

    variance_step: float
    levels: list

    @property
    def depth(self) -> int:
        return len(self.levels)


def dimension_schedule(eigenvalues, variance_step: float) -> DimensionSchedule:
    """Level l keeps the fewest dimensions reaching min(l * step, 1) of the
    cumulative variance, never fewer than one more than the previous level."""
    lam = as_vector(eigenvalues, name="eigenvalues")
    n = lam.shape[0]
    if not 0.0 < variance_step <= 1.0:
        raise DataError(f"variance step must be in (0, 1], got {variance_step}")
    total = float(lam.sum())
    if total <= 0.0:
        raise DataError("all-zero spectrum")
    if np.any(np.diff(lam) > 1e-12 * max(1.0, float(lam.max()))):
        raise DataError("eigenvalues must be nonincreasing")
    cum = np.cumsum(lam) / total
    levels: list[int] = []
    prev = 0
    level = 1
    while prev < n:
        need = min(level * variance_step, 1.0)
        # smallest count whose cumulative fraction meets the cap (tolerating
        # float round-off at exact thresholds), but always above the previous
        idx = int(np.searchsorted(cum, need - 1e-12, side="left")) + 1
        n_l = min(max(idx, prev + 1), n)
        levels.append(n_l)
        prev = n_l
        level += 1
    return DimensionSchedule(variance_step=variance_step, levels=levels)


def entry_size(n_dims: int, role: str) -> int:
    """Bytes per node entry: internal entries carry a child page reference,
    the child's radius, and its center over n_dims coordinates; leaf entries
    carry an id and a full vector."""
    if n_dims < 1:
        raise DataError(f"n_dims must be >= 1, got {n_dims}")
    if role == "internal":
        return 8 + 8 + 8 * n_dims
    if role == "leaf":
        return 8 + 8 * n_dims
    raise DataError(f"unknown entry role {role!r}")


def level_fanout(page_size: int, n_dims: int, role: str) -> int:
    """The schedule fanout floor(S / EntrySize)."""
    return page_size // entry_size(n_dims, role)


@dataclass
class SdiNode:
    kind: int
    level: int
    n_dims: int                  # dimensionality of this node's own summary
    center: np.ndarray           # (n_dims,)
    radius: float
    child_refs: np.ndarray | None = None       # (count,) int64, internal only
    child_centers: np.ndarray | None = None    # (count, n_dims), internal only
    child_radii: np.ndarray | None = None      # (count,), internal only
    rec_ids: np.ndarray | None = None          # (count,), leaf only
    rec_vectors: np.ndarray | None = None      # (count, N), leaf only

    @property
    def is_leaf(self) -> bool:
        return self.kind == _NODE_LEAF

    def entry_count(self) -> int:
        return (self.rec_ids if self.is_leaf else self.child_refs).shape[0]

    def page_bytes(self, n_features: int) -> int:
        per = entry_size(n_features if self.is_leaf else self.n_dims,
                         "leaf" if self.is_leaf else "internal")
        return _NODE_FIXED.size + 8 * self.n_dims + self.entry_count() * per


@dataclass
class SdiTree:
    n_features: int
    n_points: int
    variance_step: float
    page_size: int
    schedule: DimensionSchedule
    nodes: list | None = None                  # BFS order; ref = index, root = 0
    _image: bytes | None = field(default=None, repr=False)
    _parsed: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        if self.nodes is not None:
            return len(self.nodes)
        return len(self._image) // self.page_size - 1


def get_node(tree: SdiTree, ref: int, counters: QueryCounters | None = None) -> SdiNode:
    """Fetch one node, counting the (logical) page access."""
    if counters is not None:
        counters.pages_accessed += 1
        counters.nodes_visited += 1
    if tree.nodes is not None:
        return tree.nodes[ref]
    node = tree._parsed.get(ref)
    if node is None:
        node = _parse_page(tree, ref)
        tree._parsed[ref] = node
    return node


def _summary(block: np.ndarray) -> tuple[np.ndarray, float]:
    center = block.mean(axis=0)
    radius = float(np.sqrt(row_squared_distances(block, center).max()))
    return center, radius


def _usable_fanouts(levels, n_features, page_size):
    """What actually fits a page next to the node prefix and own center,
    validating the schedule fanout floor(S/EntrySize) >= 2 per level."""
    depth = len(levels)
    usable = []
    for idx, n_l in enumerate(levels):
        role = "leaf" if idx == depth - 1 else "internal"
        per = entry_size(n_features if role == "leaf" else n_l, role)
        if page_size // per < 2:
            raise DataError(
                f"page size {page_size} too small: level {idx + 1} fanout {page_size // per} < 2")
        fit = (page_size - _NODE_FIXED.size - 8 * n_l) // per
        if fit < (2 if role == "internal" else 1):
            raise DataError(f"page size {page_size} too small for level {idx + 1} node layout")
        usable.append(fit)
    return usable


def build_sdi(Y, ids=None, eigenvalues=None, variance_step: float = 0.25,
              page_size: int = DEFAULT_PAGE_SIZE, seed: int = 0) -> SdiTree:
    """Build the tree over rotated data whose columns are already in
    nonincreasing-variance order.

    Groups at each internal level come from k-means over the level's leading
    coordinates, with the group count sized so the subtree capacities below
    cover the points. The root is always an internal node, so even tiny
    datasets get a root plus one leaf level. Datasets exceeding the
    schedule's nominal capacity grow extra full-dimensional levels above the
    leaves rather than failing.
    """
    Y = as_matrix(Y, "Y")
    m, n = Y.shape
    if ids is None:
        ids = np.arange(m, dtype=np.int64)
    else:
        ids = np.asarray(ids, dtype=np.int64).ravel()
        if ids.shape[0] != m:
            raise DataError("ids length does not match row count")
    if eigenvalues is None:
        eigenvalues = np.sort(Y.var(axis=0))[::-1] if m > 1 else np.ones(n)
        if float(np.sum(eigenvalues)) <= 0.0:
            eigenvalues = np.ones(n)
    schedule = dimension_schedule(eigenvalues, variance_step)
    levels = schedule.levels
    depth = len(levels)
    usable = _usable_fanouts(levels, n, page_size)
    leaf_cap = usable[-1]
    # overflow levels past the schedule reuse full-dimensional internals
    overflow_fan = (page_size - _NODE_FIXED.size - 8 * n) // entry_size(n, "internal")
    caps = {depth: leaf_cap}
    for lvl in range(depth - 1, 0, -1):
        caps[lvl] = usable[lvl - 1] * caps[lvl + 1]

    def make(indices: np.ndarray, level: int):
        n_l = levels[min(level, depth) - 1]
        block = Y[indices][:, :n_l]
        center, radius = _summary(block)
        if level >= 2 and indices.shape[0] <= leaf_cap:
            return SdiNode(kind=_NODE_LEAF, level=level, n_dims=n_l,
                           center=center, radius=radius,
                           rec_ids=ids[indices].copy(),
                           rec_vectors=Y[indices].copy()), []
        if level < depth:
            fan = usable[level - 1]
            below = caps[level + 1]
        else:
            if overflow_fan < 2:
                raise DataError(
                    f"page size {page_size} too small for a full-dimension internal node")
            fan = overflow_fan
            below = leaf_cap
        groups = max(1, min(int(np.ceil(indices.shape[0] / below)), fan, indices.shape[0]))
        if groups == 1:
            members = [indices]
        else:
            part = kmeans(block, groups, seeding="furthest", max_iters=20,
                          tol=1e-5, seed=seed)
            members = [indices[part.assignments == g] for g in range(groups)]
        node = SdiNode(
            kind=_NODE_INTERNAL, level=level, n_dims=n_l, center=center, radius=radius,
            child_centers=np.asarray([Y[g][:, :n_l].mean(axis=0) for g in members]),
            child_radii=np.asarray([_summary(Y[g][:, :n_l])[1] for g in members]))
        return node, [(g, level + 1) for g in members]

    # breadth-first construction so node index == page order
    nodes: list[SdiNode] = []
    children_of: list[list[int]] = []
    queue: list[tuple[np.ndarray, int, int]] = [(np.arange(m), 1, -1)]
    while queue:
        indices, level, parent = queue.pop(0)
        node, pending = make(indices, level)
        ref = len(nodes)
        nodes.append(node)
        children_of.append([])
        if parent >= 0:
            children_of[parent].append(ref)
        queue.extend((g, lvl, ref) for g, lvl in pending)
    for ref, node in enumerate(nodes):
        if not node.is_leaf:
            node.child_refs = np.asarray(children_of[ref], dtype=np.int64)

    tree = SdiTree(n_features=n, n_points=m, variance_step=variance_step,
                   page_size=page_size, schedule=schedule, nodes=nodes)
    for node in nodes:
        if node.page_bytes(n) > page_size:
            raise FormatError("internal error: node exceeds its page budget")
    return tree


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------

def _sphere_bound(q_trunc: np.ndarray, center: np.ndarray, radius: float) -> float:
    d = float(np.sqrt(row_squared_distances(center[None, :], q_trunc)[0]))
    return max(d - radius, 0.0)


def sdi_knn(tree: SdiTree, q_rotated, k: int, visited: list | None = None) -> ResultSet:
    """Exact k-NN by best-first traversal of hypersphere lower bounds.

    counters.pages_accessed reports the nodes actually read; pruned children
    never cost a page.
    """
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    q = as_vector(q_rotated, tree.n_features, "query")
    counters = QueryCounters()
    best = KBest(k)
    seq = 0
    heap: list[tuple[float, int, int]] = [(0.0, seq, 0)]
    while heap:
        bound, _, ref = heapq.heappop(heap)
        if len(best) == k and bound > best.worst():
            break  # every remaining bound is at least this large
        node = get_node(tree, ref, counters)
        if visited is not None:
            visited.append(ref)
        if node.is_leaf:
            d = np.sqrt(row_squared_distances(node.rec_vectors, q))
            counters.distance_comps += node.rec_vectors.shape[0]
            counters.float_ops += node.rec_vectors.shape[0] * tree.n_features
            best.offer_many(d, node.rec_ids)
            continue
        q_t = q[:node.n_dims]
        diff = node.child_centers - q_t
        d_c = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        counters.float_ops += node.child_centers.shape[0] * node.n_dims
        bounds = np.maximum(d_c - node.child_radii, 0.0)
        cut = best.worst()
        for c in range(bounds.shape[0]):
            if len(best) < k or bounds[c] <= cut:
                seq += 1
                heapq.heappush(heap, (float(bounds[c]), seq, int(node.child_refs[c])))
    entries = best.sorted_entries()
    ids = np.asarray([e[1] for e in entries], dtype=np.int64)
    dists = np.asarray([e[0] for e in entries])
    return ResultSet(ids=ids, distances=dists, k_requested=k, space="original",
                     truncated=len(entries) < k, counters=counters)


def sdi_range(tree: SdiTree, q_rotated, radius: float) -> ResultSet:
    """All points within ``radius`` (inclusive), pruning children whose
    hypersphere bound exceeds it."""
    if radius < 0:
        raise DataError(f"radius must be >= 0, got {radius}")
    q = as_vector(q_rotated, tree.n_features, "query")
    counters = QueryCounters()
    out_ids: list[np.ndarray] = []
    out_d: list[np.ndarray] = []
    stack = [0]
    while stack:
        node = get_node(tree, stack.pop(), counters)
        if node.is_leaf:
            d = np.sqrt(row_squared_distances(node.rec_vectors, q))
            counters.distance_comps += node.rec_vectors.shape[0]
            counters.float_ops += node.rec_vectors.shape[0] * tree.n_features
            inside = d <= radius
            out_ids.append(node.rec_ids[inside])
            out_d.append(d[inside])
            continue
        q_t = q[:node.n_dims]
        diff = node.child_centers - q_t
        d_c = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        counters.float_ops += node.child_centers.shape[0] * node.n_dims
        bounds = np.maximum(d_c - node.child_radii, 0.0)
        for c in range(bounds.shape[0]):
            if bounds[c] <= radius:
                stack.append(int(node.child_refs[c]))
    ids = np.concatenate(out_ids) if out_ids else np.empty(0, dtype=np.int64)
    d = np.concatenate(out_d) if out_d else np.empty(0)
    order = np.lexsort((ids, d))
    return ResultSet(ids=ids[order], distances=d[order], k_requested=max(len(ids), 1),
                     space="original", counters=counters)


# ---------------------------------------------------------------------------
# paged persistence
#
# Page 0: header {magic "SDI1", version, N u32, M u64, p f64, S u32,
#   depth u32, schedule u32[depth], root_page u64, n_pages u64,
#   CRC-32 u32 of all node pages}, zero-padded to S.
# Pages 1..n_nodes: one node per page in breadth-first order (node ref r
# lives on page r + 1), zero-padded to S.
# ---------------------------------------------------------------------------

def _pack_node(node: SdiNode, n_features: int, page_size: int) -> bytes:
    out = bytearray(page_size)
    _NODE_FIXED.pack_into(out, 0, node.kind, 0, node.level, node.entry_count(), node.radius)
    pos = _NODE_FIXED.size
    out[pos:pos + 8 * node.n_dims] = np.ascontiguousarray(node.center, dtype="<f8").tobytes()
    pos += 8 * node.n_dims
    if node.is_leaf:
        for i in range(node.entry_count()):
            struct.pack_into("<Q", out, pos, int(node.rec_ids[i]))
            pos += 8
            out[pos:pos + 8 * n_features] = np.ascontiguousarray(
                node.rec_vectors[i], dtype="<f8").tobytes()
            pos += 8 * n_features
    else:
        for i in range(node.entry_count()):
            struct.pack_into("<Qd", out, pos, int(node.child_refs[i]) + 1, float(node.child_radii[i]))
            pos += 16
            out[pos:pos + 8 * node.n_dims] = np.ascontiguousarray(
                node.child_centers[i], dtype="<f8").tobytes()
            pos += 8 * node.n_dims
    return bytes(out)


def _node_dims(tree: SdiTree, level: int) -> int:
    depth = tree.schedule.depth
    return tree.schedule.levels[min(level, depth) - 1]


def _parse_page(tree: SdiTree, ref: int) -> SdiNode:
    page_size = tree.page_size
    off = (ref + 1) * page_size
    buf = tree._image
    if off + page_size > len(buf):
        raise FormatError(f"page {ref + 1} out of range")
    kind, _, level, count, radius = _NODE_FIXED.unpack_from(buf, off)
    if kind not in (_NODE_INTERNAL, _NODE_LEAF):
        raise FormatError(f"page {ref + 1}: unknown node kind {kind}")
    n_dims = _node_dims(tree, level)
    pos = off + _NODE_FIXED.size
    center = np.frombuffer(buf, dtype="<f8", count=n_dims, offset=pos).copy()
    pos += 8 * n_dims
    if kind == _NODE_LEAF:
        n = tree.n_features
        rec = np.frombuffer(buf, dtype="<u1", count=count * (8 + 8 * n), offset=pos)
        rec = rec.reshape(count, 8 + 8 * n)
        rec_ids = rec[:, :8].copy().view("<u8").ravel().astype(np.int64)
        vectors = rec[:, 8:].copy().view("<f8").reshape(count, n)
        return SdiNode(kind=kind, level=level, n_dims=n_dims, center=center,
                       radius=radius, rec_ids=rec_ids, rec_vectors=vectors)
    per = entry_size(n_dims, "internal")
    rec = np.frombuffer(buf, dtype="<u1", count=count * per, offset=pos).reshape(count, per)
    refs = rec[:, :8].copy().view("<u8").ravel().astype(np.int64) - 1
    radii = rec[:, 8:16].copy().view("<f8").ravel()
    centers = rec[:, 16:].copy().view("<f8").reshape(count, n_dims)
    return SdiNode(kind=kind, level=level, n_dims=n_dims, center=center, radius=radius,
                   child_refs=refs, child_centers=centers, child_radii=radii)


def save_sdi(tree: SdiTree, path) -> None:
    if tree.nodes is None:
        # file-backed tree: materialize pages through the parser
        nodes = [get_node(tree, r) for r in range(tree.n_nodes)]
    else:
        nodes = tree.nodes
    page_size = tree.page_size
    body = b"".join(_pack_node(node, tree.n_features, page_size) for node in nodes)
    head = _HEADER_FIXED.pack(SDI_MAGIC, SDI_VERSION, tree.n_features, tree.n_points,
                              tree.variance_step, page_size, tree.schedule.depth)
    head += np.asarray(tree.schedule.levels, dtype="<u4").tobytes()
    head += struct.pack("<QQI", 1, len(nodes) + 1, zlib.crc32(body))
    if len(head) > page_size:
        raise FormatError(f"page size {page_size} cannot hold the header")
    with open(path, "wb") as f:
        f.write(head + b"\x00" * (page_size - len(head)))
        f.write(body)


def open_sdi(path, verify: bool = True) -> SdiTree:
    """Open a paged tree file; node pages parse lazily as searches touch them."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _HEADER_FIXED.size:
        raise FormatError(f"{path}: truncated index file")
    magic, version, n, m, p, page_size, depth = _HEADER_FIXED.unpack_from(buf, 0)
    if magic != SDI_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {SDI_MAGIC!r}")
    if version != SDI_VERSION:
        raise FormatError(f"{path}: unsupported index version {version}")
    pos = _HEADER_FIXED.size
    levels = np.frombuffer(buf, dtype="<u4", count=depth, offset=pos).astype(int).tolist()
    pos += 4 * depth
    root_page, n_pages, crc = struct.unpack_from("<QQI", buf, pos)
    if root_page != 1:
        raise FormatError(f"{path}: unexpected root page {root_page}")
    if len(buf) != n_pages * page_size:
        raise FormatError(f"{path}: file length {len(buf)} != {n_pages} pages of {page_size}")
    if verify and zlib.crc32(buf[page_size:]) != crc:
        raise FormatError(f"{path}: node-page CRC mismatch")
    return SdiTree(n_features=n, n_points=m, variance_step=p, page_size=page_size,
                   schedule=DimensionSchedule(variance_step=p, levels=levels),
                   nodes=None, _image=buf)
