"""Ordered-partition tree over one cluster's projected points.

The tree recursively splits points on one dimension at a time (round-robin
through ``dims_order``) into rank-equal slabs, so sibling regions are
disjoint half-open intervals and populations stay balanced. Leaves hold the
points themselves. The whole tree lives in one contiguous byte arena
addressed by 32-bit offsets, which makes serialization a header plus a
straight copy and loading a single read.

Node records inside the arena (little-endian, 8-byte aligned):

  internal: u32 kind=0 | u32 split_dim | u32 n_children | u32 pad
            f64 boundaries[n_children-1] | u32 child_offsets[n_children] | pad
  leaf:     u32 kind=1 | u32 count | u64 ids[count] | f64 coords[count*n]

Deletions are a runtime overlay (a tombstone id set honored by searches);
the serialized image always captures the tree as built.
"""

from __future__ import annotations

import heapq
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError
from .results import QueryCounters, ResultSet, make_result
from .validation import as_matrix, as_vector

OPTREE_MAGIC = b"OPT1"
OPTREE_VERSION = 1
DEFAULT_FANOUT = 5
DEFAULT_LEAF_CAPACITY = 64

_KIND_INTERNAL = 0
_KIND_LEAF = 1


@dataclass
class OpTree:
    n_dims: int
    n_points: int
    fanout: int
    leaf_capacity: int
    dims_order: np.ndarray
    arena: bytes
    tombstones: set = field(default_factory=set)


# ---------------------------------------------------------------------------
# build
# ---------------------------------------------------------------------------

def _slab_boundaries(values: np.ndarray, fanout: int) -> list[float]:
    """Order-statistic cut values giving up to ``fanout`` rank-equal groups.

    Duplicate coordinates collapse cuts; an empty list means the dimension
    cannot split these points at all.
    """
    s = np.sort(values)
    m = s.shape[0]
    bounds: list[float] = []
    for i in range(1, fanout):
        v = float(s[(i * m) // fanout])
        if v > float(s[0]) and (not bounds or v > bounds[-1]):
            bounds.append(v)
    return bounds


def _align8(n: int) -> int:
    return (n + 7) & ~7


class _Internal:
    __slots__ = ("split_dim", "boundaries", "children")

    def __init__(self, split_dim, boundaries, children):
        self.split_dim = split_dim
        self.boundaries = boundaries
        self.children = children

    def byte_size(self, n_dims: int) -> int:
        nc = len(self.children)
        return _align8(16 + 8 * (nc - 1) + 4 * nc)


class _Leaf:
    __slots__ = ("indices",)

    def __init__(self, indices):
        self.indices = indices

    def byte_size(self, n_dims: int) -> int:
        cnt = len(self.indices)
        return 8 + 8 * cnt + 8 * n_dims * cnt


def build_optree(points, ids=None, fanout: int = DEFAULT_FANOUT,
                 leaf_capacity: int = DEFAULT_LEAF_CAPACITY,
                 dims_order=None) -> OpTree:
    """Build the tree over an m x n point matrix.

    ``dims_order`` is the dimension priority cycled through by depth; the
    natural choice for rotated cluster data is the identity (columns already
    come in nonincreasing-eigenvalue order), which is the default.

    Points that are identical on the current dimension stay in one child and
    the next dimension is tried; points identical on every dimension end up
    in an oversized leaf.
    """
    pts = as_matrix(points, "points")
    m, n = pts.shape
    if not 2 <= fanout <= 16:
        raise DataError(f"fanout must be in [2, 16], got {fanout}")
    if leaf_capacity < 1:
        raise DataError(f"leaf_capacity must be >= 1, got {leaf_capacity}")
    if ids is None:
        ids = np.arange(m, dtype=np.int64)
    else:
        ids = np.asarray(ids, dtype=np.int64).ravel()
        if ids.shape[0] != m:
            raise DataError("ids length does not match point count")
    if dims_order is None:
        order = np.arange(n, dtype=np.uint32)
    else:
        order = np.asarray(dims_order, dtype=np.uint32).ravel()
        if sorted(order.tolist()) != list(range(n)):
            raise DataError("dims_order must be a permutation of the dimensions")

    def make_node(indices: np.ndarray, depth: int):
        if indices.shape[0] <= leaf_capacity:
            return _Leaf(indices)
        for attempt in range(n):
            dim = int(order[(depth + attempt) % n])
            bounds = _slab_boundaries(pts[indices, dim], fanout)
            if not bounds:
                continue
            barr = np.asarray(bounds)
            child_of = np.searchsorted(barr, pts[indices, dim], side="right")
            children = [
                make_node(indices[child_of == c], depth + attempt + 1)
                for c in range(len(bounds) + 1)
            ]
            return _Internal(dim, bounds, children)
        return _Leaf(indices)  # identical on every dimension

    root = make_node(np.arange(m), 0)

    # Preorder arena layout: assign offsets, then emit.
    offsets: dict[int, int] = {}
    cursor = 0
    stack = [root]
    ordered = []
    while stack:
        node = stack.pop()
        offsets[id(node)] = cursor
        cursor += node.byte_size(n)
        ordered.append(node)
        if isinstance(node, _Internal):
            stack.extend(reversed(node.children))
    if cursor > 0xFFFFFFFF:
        raise DataError("tree exceeds the 32-bit arena addressing limit")

    arena = bytearray(cursor)
    for node in ordered:
        off = offsets[id(node)]
        if isinstance(node, _Internal):
            nc = len(node.children)
            struct.pack_into("<IIII", arena, off, _KIND_INTERNAL, node.split_dim, nc, 0)
            pos = off + 16
            for b in node.boundaries:
                struct.pack_into("<d", arena, pos, b)
                pos += 8
            for child in node.children:
                struct.pack_into("<I", arena, pos, offsets[id(child)])
                pos += 4
        else:
            cnt = len(node.indices)
            struct.pack_into("<II", arena, off, _KIND_LEAF, cnt)
            pos = off + 8
            arena[pos:pos + 8 * cnt] = ids[node.indices].astype("<i8").tobytes()
            pos += 8 * cnt
            arena[pos:pos + 8 * n * cnt] = np.ascontiguousarray(pts[node.indices], dtype="<f8").tobytes()

    return OpTree(n_dims=n, n_points=m, fanout=fanout, leaf_capacity=leaf_capacity,
                  dims_order=order, arena=bytes(arena))


# ---------------------------------------------------------------------------
# node access
# ---------------------------------------------------------------------------

def parse_node(tree: OpTree, offset: int) -> dict:
    """Decode one node record; used by searches and structural audits."""
    arena = tree.arena
    (kind,) = struct.unpack_from("<I", arena, offset)
    if kind == _KIND_INTERNAL:
        _, split_dim, nc, _ = struct.unpack_from("<IIII", arena, offset)
        pos = offset + 16
        boundaries = np.frombuffer(arena, dtype="<f8", count=nc - 1, offset=pos)
        pos += 8 * (nc - 1)
        children = np.frombuffer(arena, dtype="<u4", count=nc, offset=pos)
        return {"kind": "internal", "split_dim": split_dim,
                "boundaries": boundaries, "children": children}
    if kind == _KIND_LEAF:
        _, cnt = struct.unpack_from("<II", arena, offset)
        pos = offset + 8
        leaf_ids = np.frombuffer(arena, dtype="<i8", count=cnt, offset=pos)
        pos += 8 * cnt
        coords = np.frombuffer(arena, dtype="<f8", count=cnt * tree.n_dims, offset=pos)
        return {"kind": "leaf", "ids": leaf_ids, "coords": coords.reshape(cnt, tree.n_dims)}
    raise FormatError(f"corrupt node record at offset {offset}: kind={kind}")


def mark_deleted(tree: OpTree, delete_ids) -> None:
    """Tombstone ids so searches skip them. Apply only while no search runs."""
    tree.tombstones.update(int(i) for i in np.atleast_1d(delete_ids))


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------

def _leaf_scan(tree, node, q, counters):
    """Distances from q to a leaf's live points."""
    coords = node["coords"]
    diff = coords - q
    d2 = np.einsum("ij,ij->i", diff, diff)
    counters.distance_comps += coords.shape[0]
    counters.float_ops += coords.shape[0] * tree.n_dims
    leaf_ids = node["ids"]
    if tree.tombstones:
        live = np.fromiter((int(i) not in tree.tombstones for i in leaf_ids),
                           dtype=bool, count=leaf_ids.shape[0])
        return leaf_ids[live], d2[live]
    return leaf_ids, d2


def _child_gaps(node, qv: float):
    """1-D distances from the query's split coordinate to each child slab."""
    bounds = node["boundaries"]
    nc = node["children"].shape[0]
    j = int(np.searchsorted(bounds, qv, side="right"))
    gaps = np.empty(nc)
    for c in range(nc):
        if c < j:
            gaps[c] = qv - bounds[c]
        elif c > j:
            gaps[c] = bounds[c - 1] - qv
        else:
            gaps[c] = 0.0
    return gaps, j


def optree_knn(tree: OpTree, q, k: int, d_init: float | None = None,
               visited: list | None = None) -> ResultSet:
    """Exact k nearest neighbors among the tree's (live) points.

    Sibling slabs are expanded outward from the one containing q and skipped
    once their 1-D boundary distance can no longer beat the running k-th
    distance. ``d_init`` seeds the pruning radius for multi-cluster searches;
    results are then capped at that radius.
    """
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    q = as_vector(q, tree.n_dims, "query")
    counters = QueryCounters()
    heap: list[tuple[float, int]] = []  # (-d2, -id): top is the current worst
    d_init2 = d_init * d_init if d_init is not None else np.inf

    def bound2() -> float:
        return -heap[0][0] if len(heap) == k else d_init2

    def offer(cand_ids, cand_d2):
        for i in range(cand_ids.shape[0]):
            d2 = float(cand_d2[i])
            pid = int(cand_ids[i])
            if len(heap) < k:
                heapq.heappush(heap, (-d2, -pid))
            else:
                worst_d2, worst_id = -heap[0][0], -heap[0][1]
                if (d2, pid) < (worst_d2, worst_id):
                    heapq.heapreplace(heap, (-d2, -pid))

    def visit(offset: int):
        node = parse_node(tree, offset)
        counters.nodes_visited += 1
        if visited is not None:
            visited.append(offset)
        if node["kind"] == "leaf":
            leaf_ids, d2 = _leaf_scan(tree, node, q, counters)
            offer(leaf_ids, d2)
            return
        gaps, j = _child_gaps(node, float(q[node["split_dim"]]))
        for c in np.lexsort((np.arange(gaps.shape[0]), gaps)):
            if gaps[c] * gaps[c] <= bound2():  # ties kept: equal-distance ids matter
                visit(int(node["children"][c]))

    visit(0)
    entries = sorted(((-d2, -pid) for d2, pid in heap))
    ids = np.asarray([e[1] for e in entries], dtype=np.int64)
    dists = np.sqrt(np.asarray([e[0] for e in entries]))
    return make_result(ids, dists, k, "subspace", counters,
                       truncated=len(entries) < k and d_init is None)


def optree_range(tree: OpTree, q, radius: float, visited: list | None = None) -> ResultSet:
    """All live points within ``radius`` (inclusive) of q."""
    if radius < 0:
        raise DataError(f"radius must be >= 0, got {radius}")
    q = as_vector(q, tree.n_dims, "query")
    counters = QueryCounters()
    r2 = radius * radius
    out_ids: list[np.ndarray] = []
    out_d2: list[np.ndarray] = []

    def visit(offset: int):
        node = parse_node(tree, offset)
        counters.nodes_visited += 1
        if visited is not None:
            visited.append(offset)
        if node["kind"] == "leaf":
            leaf_ids, d2 = _leaf_scan(tree, node, q, counters)
            inside = d2 <= r2
            out_ids.append(leaf_ids[inside])
            out_d2.append(d2[inside])
            return
        gaps, _ = _child_gaps(node, float(q[node["split_dim"]]))
        for c in range(gaps.shape[0]):
            if gaps[c] <= radius:
                visit(int(node["children"][c]))

    visit(0)
    ids = np.concatenate(out_ids) if out_ids else np.empty(0, dtype=np.int64)
    d2 = np.concatenate(out_d2) if out_d2 else np.empty(0)
    return make_result(ids, np.sqrt(d2), max(len(ids), 1), "subspace", counters)


# ---------------------------------------------------------------------------
# serialization: header + raw arena, loadable with a single read
# ---------------------------------------------------------------------------

_IMG_FIXED = struct.Struct("<4sIIQII")  # magic, version, n, m, fanout, leaf_capacity


def serialize_optree(tree: OpTree) -> bytes:
    head = _IMG_FIXED.pack(OPTREE_MAGIC, OPTREE_VERSION, tree.n_dims, tree.n_points,
                           tree.fanout, tree.leaf_capacity)
    head += tree.dims_order.astype("<u4").tobytes()
    head += struct.pack("<I", zlib.crc32(tree.arena))
    pad = (-len(head)) % 8
    return head + b"\x00" * pad + tree.arena


def deserialize_optree(buf: bytes) -> OpTree:
    if len(buf) < _IMG_FIXED.size:
        raise FormatError("truncated tree image")
    magic, version, n, m, fanout, leaf_capacity = _IMG_FIXED.unpack_from(buf, 0)
    if magic != OPTREE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {OPTREE_MAGIC!r}")
    if version != OPTREE_VERSION:
        raise FormatError(f"unsupported tree image version {version}")
    pos = _IMG_FIXED.size
    if pos + 4 * n + 4 > len(buf):
        raise FormatError("truncated tree image header")
    dims_order = np.frombuffer(buf, dtype="<u4", count=n, offset=pos).copy()
    pos += 4 * n
    (crc,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    pos += (-pos) % 8
    arena = buf[pos:]
    if zlib.crc32(arena) != crc:
        raise FormatError("tree arena CRC mismatch")
    return OpTree(n_dims=n, n_points=m, fanout=fanout, leaf_capacity=leaf_capacity,
                  dims_order=dims_order, arena=bytes(arena))


def save_optree(tree: OpTree, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_optree(tree))


def load_optree(path) -> OpTree:
    """Load an image with one contiguous read; only the header is inspected
    before the arena is adopted as-is."""
    with open(path, "rb") as f:
        buf = f.read()
    return deserialize_optree(buf)
