"""Ordered-partition tree: structural audits, exact search against a brute
force oracle, pruning soundness, and the single-read serialization story."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csvdkit import (DataError, FormatError, build_optree, deserialize_optree,
                     load_optree, optree_knn, optree_range, save_optree,
                     serialize_optree)
from csvdkit.optree import mark_deleted, parse_node

from conftest import POINTS12, brute_force_knn, brute_force_range


def iter_nodes(tree):
    """(offset, node, slab) triples; slab maps split offsets already applied
    on the path, as (dim, low, high) interval chains."""
    stack = [(0, [])]
    while stack:
        off, chain = stack.pop()
        node = parse_node(tree, off)
        yield off, node, chain
        if node["kind"] == "internal":
            b = node["boundaries"]
            for c, child_off in enumerate(node["children"]):
                low = -np.inf if c == 0 else b[c - 1]
                high = np.inf if c == len(b) else b[c]
                stack.append((int(child_off), chain + [(node["split_dim"], low, high)]))


def audit_structure(tree, points, check_balance=True):
    """Containment, disjointness (via the interval chains), leaf capacity,
    and sibling balance."""
    seen = {}
    for _, node, chain in iter_nodes(tree):
        if node["kind"] == "internal":
            b = node["boundaries"]
            assert np.all(np.diff(b) > 0), "boundaries must strictly increase"
        else:
            for i, pid in enumerate(node["ids"]):
                assert pid not in seen, "id appears in two leaves"
                seen[int(pid)] = True
                for dim, low, high in chain:
                    v = node["coords"][i, dim]
                    assert low <= v < high or (high == np.inf and v >= low)
    assert len(seen) == len(points)
    if check_balance:
        for _, node, _ in iter_nodes(tree):
            if node["kind"] == "internal":
                sizes = [_subtree_size(tree, int(c)) for c in node["children"]]
                assert max(sizes) - min(sizes) <= tree.fanout


def _subtree_size(tree, off):
    node = parse_node(tree, off)
    if node["kind"] == "leaf":
        return len(node["ids"])
    return sum(_subtree_size(tree, int(c)) for c in node["children"])


class TestBuild:
    def test_single_leaf_when_small(self, rng):
        pts = rng.normal(size=(10, 3))
        tree = build_optree(pts, leaf_capacity=16)
        root = parse_node(tree, 0)
        assert root["kind"] == "leaf"
        assert len(root["ids"]) == 10

    def test_structure_random(self, rng):
        pts = rng.normal(size=(1000, 8))
        tree = build_optree(pts, fanout=5, leaf_capacity=20)
        audit_structure(tree, pts)
        for _, node, _ in iter_nodes(tree):
            if node["kind"] == "leaf":
                assert len(node["ids"]) <= 20

    def test_twelve_points_one_per_leaf(self):
        tree = build_optree(POINTS12, fanout=12, leaf_capacity=1)
        leaf_sizes = [len(n["ids"]) for _, n, _ in iter_nodes(tree) if n["kind"] == "leaf"]
        assert all(s == 1 for s in leaf_sizes)
        for j, p in enumerate(POINTS12):
            res = optree_knn(tree, p, 1)
            assert res.ids[0] == j
            assert res.distances[0] == 0.0

    def test_duplicate_coordinates_split_on_next_dim(self):
        pts = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0], [1.0, 3.0],
                        [1.0, 4.0], [1.0, 5.0]])
        tree = build_optree(pts, fanout=3, leaf_capacity=2)
        audit_structure(tree, pts, check_balance=False)
        root = parse_node(tree, 0)
        assert root["kind"] == "internal"
        assert root["split_dim"] == 1  # dim 0 is constant, build moved on

    def test_all_identical_points_oversized_leaf(self):
        pts = np.ones((9, 3))
        tree = build_optree(pts, fanout=3, leaf_capacity=4)
        root = parse_node(tree, 0)
        assert root["kind"] == "leaf"
        assert len(root["ids"]) == 9

    def test_fanout_bounds(self, rng):
        pts = rng.normal(size=(10, 2))
        with pytest.raises(DataError):
            build_optree(pts, fanout=1)
        with pytest.raises(DataError):
            build_optree(pts, fanout=17)

    def test_rank_balance_on_distinct_values(self, rng):
        pts = rng.normal(size=(500, 4))
        tree = build_optree(pts, fanout=4, leaf_capacity=10)
        audit_structure(tree, pts, check_balance=True)


class TestKnn:
    def test_stored_point_first(self, rng):
        pts = rng.normal(size=(200, 5))
        tree = build_optree(pts, leaf_capacity=16)
        res = optree_knn(tree, pts[42], 3)
        assert res.ids[0] == 42
        assert res.distances[0] == 0.0

    def test_k_equals_m_full_sort(self, rng):
        pts = rng.normal(size=(60, 4))
        tree = build_optree(pts, leaf_capacity=8)
        q = rng.normal(size=4)
        res = optree_knn(tree, q, 60)
        ids, dists = brute_force_knn(pts, q, 60)
        np.testing.assert_array_equal(res.ids, ids)
        np.testing.assert_allclose(res.distances, dists, rtol=1e-12)

    def test_matches_oracle_randomized(self, rng):
        for trial in range(30):
            m = int(rng.integers(20, 400))
            n = int(rng.integers(2, 9))
            pts = rng.normal(size=(m, n))
            tree = build_optree(pts, fanout=int(rng.integers(2, 7)),
                                leaf_capacity=int(rng.integers(1, 32)))
            k = int(rng.integers(1, min(m, 25)))
            q = rng.normal(size=n) * 1.5
            res = optree_knn(tree, q, k)
            ids, dists = brute_force_knn(pts, q, k)
            np.testing.assert_array_equal(res.ids, ids)
            np.testing.assert_allclose(res.distances, dists, rtol=1e-9, atol=1e-12)

    def test_twelve_point_query(self):
        tree = build_optree(POINTS12, fanout=5, leaf_capacity=2)
        q = np.array([10.0, 11.0, 10.0])
        res = optree_knn(tree, q, 3)
        ids, dists = brute_force_knn(POINTS12, q, 3)
        np.testing.assert_array_equal(res.ids, ids)
        np.testing.assert_allclose(res.distances, dists)

    def test_integer_grid_ties_match_oracle(self, rng):
        # exact duplicate distances exercise the (distance, id) tie-break
        pts = rng.integers(0, 4, size=(120, 3)).astype(float)
        tree = build_optree(pts, fanout=4, leaf_capacity=6)
        for _ in range(20):
            q = rng.integers(0, 4, size=3).astype(float)
            res = optree_knn(tree, q, 7)
            ids, dists = brute_force_knn(pts, q, 7)
            np.testing.assert_array_equal(res.ids, ids)

    def test_pruning_soundness(self, rng):
        pts = rng.normal(size=(300, 4))
        tree = build_optree(pts, fanout=5, leaf_capacity=10)
        q = rng.normal(size=4)
        visited = []
        res = optree_knn(tree, q, 8, visited=visited)
        d_final = res.distances[-1]
        visited = set(visited)
        for off, node, chain in iter_nodes(tree):
            if off in visited or not chain:
                continue
            # 1-D lower bound from the deepest visited ancestor's slab
            dim, low, high = chain[-1]
            gap = max(low - q[dim], q[dim] - high, 0.0) if high != np.inf else max(low - q[dim], 0.0)
            parent_visited = True  # only meaningful for children of visited parents
            if parent_visited and gap > 0:
                assert gap >= d_final - 1e-12 or _ancestor_skipped(tree, off, visited)

    def test_work_reduction_on_clustered_data(self):
        from csvdkit.datasets import gen_blobs

        data, _ = gen_blobs(10000, 8, n_clusters=8, seed=13)
        tree = build_optree(data, fanout=5, leaf_capacity=64)
        total = 0
        rng = np.random.default_rng(0)
        for _ in range(20):
            q = data[rng.integers(10000)] + 0.1 * rng.normal(size=8)
            res = optree_knn(tree, q, 10)
            total += res.counters.distance_comps
        assert total / 20 < 0.5 * 10000

    def test_k_below_one_rejected(self, rng):
        tree = build_optree(rng.normal(size=(10, 2)))
        with pytest.raises(DataError):
            optree_knn(tree, np.zeros(2), 0)


def _ancestor_skipped(tree, target, visited):
    """True when some ancestor of ``target`` was itself never visited (so the
    subtree was pruned higher up)."""
    hits = []

    def walk(off, path):
        node = parse_node(tree, off)
        if off == target:
            hits.append(any(p not in visited for p in path))
            return
        if node["kind"] == "internal":
            for c in node["children"]:
                walk(int(c), path + [off])

    walk(0, [])
    return hits[0] if hits else False


class TestRange:
    def test_zero_radius_on_stored_point(self, rng):
        pts = rng.normal(size=(50, 3))
        tree = build_optree(pts, leaf_capacity=4)
        res = optree_range(tree, pts[7], 0.0)
        assert 7 in res.ids.tolist()

    def test_infinite_radius_returns_all(self, rng):
        pts = rng.normal(size=(30, 3))
        tree = build_optree(pts, leaf_capacity=4)
        res = optree_range(tree, np.zeros(3), np.inf)
        assert len(res) == 30

    def test_matches_filter_oracle(self, rng):
        pts = rng.normal(size=(200, 4))
        tree = build_optree(pts, fanout=3, leaf_capacity=8)
        for _ in range(15):
            q = rng.normal(size=4)
            r = float(rng.uniform(0.3, 2.5))
            res = optree_range(tree, q, r)
            np.testing.assert_array_equal(np.sort(res.ids), brute_force_range(pts, q, r))


class TestTombstones:
    def test_deleted_points_skipped(self, rng):
        pts = rng.normal(size=(80, 3))
        tree = build_optree(pts, leaf_capacity=8)
        q = pts[5]
        assert optree_knn(tree, q, 1).ids[0] == 5
        mark_deleted(tree, [5])
        res = optree_knn(tree, q, 1)
        assert res.ids[0] != 5
        live = np.asarray([i for i in range(80) if i != 5])
        ids, _ = brute_force_knn(pts[live], q, 1)
        assert res.ids[0] == live[ids[0]]


class TestSerialization:
    def test_roundtrip_query_equivalence(self, rng):
        pts = rng.normal(size=(400, 6))
        tree = build_optree(pts, fanout=5, leaf_capacity=16)
        tree2 = deserialize_optree(serialize_optree(tree))
        for _ in range(100):
            q = rng.normal(size=6)
            a = optree_knn(tree, q, 5)
            b = optree_knn(tree2, q, 5)
            np.testing.assert_array_equal(a.ids, b.ids)
            np.testing.assert_array_equal(a.distances, b.distances)

    def test_canonical_form(self, rng):
        pts = rng.normal(size=(100, 4))
        blob = serialize_optree(build_optree(pts))
        assert serialize_optree(deserialize_optree(blob)) == blob

    def test_truncated_image_typed_error(self, rng):
        blob = serialize_optree(build_optree(rng.normal(size=(50, 3))))
        with pytest.raises(FormatError):
            deserialize_optree(blob[:10])

    def test_bad_magic(self, rng):
        blob = bytearray(serialize_optree(build_optree(rng.normal(size=(50, 3)))))
        blob[:4] = b"XXXX"
        with pytest.raises(FormatError, match="magic"):
            deserialize_optree(bytes(blob))

    def test_corrupt_arena_crc(self, rng):
        blob = bytearray(serialize_optree(build_optree(rng.normal(size=(50, 3)))))
        blob[-5] ^= 0x1
        with pytest.raises(FormatError, match="CRC"):
            deserialize_optree(bytes(blob))

    def test_load_is_single_read(self, tmp_path, rng, monkeypatch):
        pts = rng.normal(size=(300, 5))
        path = tmp_path / "tree.opt"
        save_optree(build_optree(pts), path)

        read_calls = []
        real_open = open

        class CountingFile:
            def __init__(self, f):
                self._f = f

            def read(self, *a):
                read_calls.append(a)
                return self._f.read(*a)

            def __enter__(self):
                return self

            def __exit__(self, *a):
                return self._f.__exit__(*a)

            def __getattr__(self, name):
                return getattr(self._f, name)

        def counting_open(file, *a, **kw):
            f = real_open(file, *a, **kw)
            return CountingFile(f) if str(file) == str(path) else f

        monkeypatch.setattr("builtins.open", counting_open)
        tree = load_optree(path)
        assert len(read_calls) == 1  # one contiguous read, then header checks
        q = rng.normal(size=5)
        ids, _ = brute_force_knn(pts, q, 4)
        np.testing.assert_array_equal(optree_knn(tree, q, 4).ids, ids)


@given(st.integers(0, 2 ** 31), st.integers(2, 6), st.integers(1, 12))
@settings(max_examples=25, deadline=None)
def test_knn_exactness_property(seed, fanout, k):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(max(k, 5), 150))
    pts = rng.normal(size=(m, 3))
    tree = build_optree(pts, fanout=fanout, leaf_capacity=int(rng.integers(1, 20)))
    q = rng.normal(size=3)
    kk = min(k, m)
    res = optree_knn(tree, q, kk)
    ids, dists = brute_force_knn(pts, q, kk)
    np.testing.assert_array_equal(res.ids, ids)
    np.testing.assert_allclose(res.distances, dists, rtol=1e-9, atol=1e-12)
