"""Batch command-line front end.

Subcommands: ingest (CSV/FVEC -> validated FVEC), gen (synthetic datasets),
build (model + within-cluster indexes), query (batch k-NN to NDJSON), and
sweep (cross-product evaluation grid to CSV).

Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure,
5 corrupt file.
"""

from __future__ import annotations

import argparse
import csv as csv_mod
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import csvd as csvd_mod
from . import datasets, formats
from . import query as query_mod
from . import sditree as sditree_mod
from .errors import DataError, FormatError, NumericError
from .linalg import studentize

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CORRUPT = 5


def _read_csv_matrix(path) -> np.ndarray:
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            cells = [c for c in line.replace("\t", ",").split(",") if c != ""]
            try:
                row = [float(c) for c in cells]
            except ValueError as exc:
                raise DataError(f"{path}: non-numeric cell on line {lineno}") from exc
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataError(
                    f"{path}: ragged row on line {lineno} ({len(row)} cells, expected {width})")
            rows.append(row)
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), width or 0)


def _read_any_matrix(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(4)
    if head == formats.FVEC_MAGIC:
        return formats.read_fvec(path)
    return _read_csv_matrix(path)


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("CSVD_THREADS")
    return max(1, int(env)) if env else 1


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    data = _read_any_matrix(args.input)
    if data.shape[0] < 1:
        raise DataError(f"{args.input}: no data rows")
    fm = studentize(data)
    formats.write_fvec(args.output, data, dtype=args.dtype)
    formats.write_stats_sidecar(args.output, fm.col_means, fm.col_stds, fm.degenerate)
    print(f"wrote {args.output}: {data.shape[0]} x {data.shape[1]} ({args.dtype})")
    return EXIT_OK


def cmd_gen(args) -> int:
    kwargs = {}
    if args.noise is not None:
        kwargs["noise"] = args.noise
    if args.separation is not None:
        kwargs["separation"] = args.separation
    if args.length is not None:
        kwargs["length"] = args.length
    data, labels = datasets.generate(args.kind, args.num_points, args.num_features,
                                     n_clusters=args.clusters, seed=args.seed, **kwargs)
    formats.write_fvec(args.output, data, dtype=args.dtype)
    if labels is not None:
        np.save(str(args.output) + ".labels.npy", labels)
    print(f"wrote {args.output}: {args.kind}, {data.shape[0]} x {data.shape[1]}, seed {args.seed}")
    return EXIT_OK


def cmd_build(args) -> int:
    data = _read_any_matrix(args.dataset)
    if data.shape[0] < 1:
        raise DataError(f"{args.dataset}: no data rows")
    fm = studentize(data)
    t0 = time.perf_counter()
    model = csvd_mod.build_csvd(fm, args.clusters, args.objective, args.target,
                                seeding=args.seeding, seed=args.seed)
    if args.index == "optree":
        csvd_mod.attach_optrees(model, args.fanout, args.leaf_capacity)
    csvd_mod.save_model(model, args.output)
    if args.index == "sdi":
        csvd_mod.attach_sditrees(model, args.variance_step, args.page_size, args.seed)
        for h, tree in enumerate(model.sditrees):
            if tree is not None:
                sditree_mod.save_sdi(tree, f"{args.output}.sdi{h}")
    ms = (time.perf_counter() - t0) * 1000.0
    m, n = fm.n_points, fm.n_features
    isc = (m * n) / model.index_volume
    print(f"clusters={model.n_clusters} retained={[e.retained for e in model.clusters]}")
    print(f"index_volume={model.index_volume} compression={isc:.3f}x "
          f"achieved_nmse={model.achieved_nmse:.6f} build_ms={ms:.1f}")
    return EXIT_OK


def _load_model_with_indexes(model_path, index_choice: str):
    model = csvd_mod.load_model(model_path)
    if index_choice in ("auto", "sdi"):
        trees = []
        found = False
        for h in range(model.n_clusters):
            p = Path(f"{model_path}.sdi{h}")
            if p.exists():
                trees.append(sditree_mod.open_sdi(p))
                found = True
            else:
                trees.append(None)
        if found:
            model.sditrees = trees
        elif index_choice == "sdi":
            raise DataError(f"no {model_path}.sdi* files found for --index sdi")
    if index_choice == "scan":
        model.optrees = None
        model.sditrees = None
    if index_choice == "optree" and model.optrees is None:
        raise DataError("model has no embedded trees; rebuild with --index optree")
    return model


def cmd_query(args) -> int:
    model = _load_model_with_indexes(args.model, args.index)
    queries = _read_any_matrix(args.queries) if Path(args.queries).stat().st_size else \
        np.empty((0, model.n_features))
    if queries.shape[0] and queries.shape[1] != model.n_features:
        raise DataError(
            f"queries have {queries.shape[1]} features, model expects {model.n_features}")
    fm = None
    if args.mode == "exact":
        if args.dataset is None:
            raise DataError("--dataset is required for exact mode (candidate verification)")
        fm = studentize(_read_any_matrix(args.dataset))
        if fm.n_points != model.n_points:
            raise DataError(
                f"dataset has {fm.n_points} rows, model was built over {model.n_points}")

    k = args.k
    if k > model.n_points:
        print(f"warning: k={k} exceeds {model.n_points} indexed points; "
              f"returning {model.n_points}", file=sys.stderr)

    def one(i_q):
        i, q = i_q
        if args.mode == "exact":
            res = query_mod.knn_exact(model, fm, q, k)
        else:
            res = query_mod.knn_approx(model, q, args.candidates or k)
        return i, res

    rows = map(one, enumerate(queries))
    n_threads = _threads(args)
    if n_threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            rows = list(pool.map(one, enumerate(queries)))

    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for i, res in rows:
            rec = {
                "query_index": int(i),
                "ids": res.ids.tolist(),
                "distances": [float(d) for d in res.distances],
                "counters": dataclasses.asdict(res.counters),
            }
            out.write(json.dumps(rec) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_sweep(args) -> int:
    data = _read_any_matrix(args.dataset)
    fm = studentize(data)
    rng = np.random.default_rng(args.seed)
    if args.queries:
        queries = _read_any_matrix(args.queries)
    else:
        take = min(args.num_queries, data.shape[0])
        queries = data[rng.choice(data.shape[0], size=take, replace=False)]
    h_list = [int(x) for x in args.clusters.split(",")]
    nmse_list = [float(x) for x in args.nmse.split(",")]
    n_threads = _threads(args)

    fieldnames = ["H", "nmse_target", "achieved_nmse", "index_volume", "compression_ratio",
                  "recall", "precision", "k_star", "mean_distance_comps", "mean_float_ops",
                  "mean_clusters_visited", "mean_candidates_verified", "mean_pages_accessed",
                  "wall_ms"]
    rows = []
    for h in h_list:
        for target in nmse_list:
            model = csvd_mod.build_csvd(fm, h, "nmse", target, seed=args.seed)
            if args.index == "optree":
                csvd_mod.attach_optrees(model)
            approx = query_mod.evaluate(model, fm, queries, args.k, mode="approx",
                                        threads=n_threads)
            exact = query_mod.evaluate(model, fm, queries, args.k, mode="exact",
                                       threads=n_threads)
            rows.append({
                "H": h,
                "nmse_target": target,
                "achieved_nmse": round(model.achieved_nmse, 9),
                "index_volume": model.index_volume,
                "compression_ratio": round(fm.n_points * fm.n_features / model.index_volume, 6),
                "recall": round(approx.recall, 6),
                "precision": round(approx.precision, 6),
                "k_star": round(approx.k_star, 3),
                "mean_distance_comps": round(exact.mean_distance_comps, 1),
                "mean_float_ops": round(exact.mean_float_ops, 1),
                "mean_clusters_visited": round(exact.mean_clusters_visited, 3),
                "mean_candidates_verified": round(exact.mean_candidates_verified, 1),
                "mean_pages_accessed": round(exact.mean_pages_accessed, 1),
                "wall_ms": round(approx.wall_ms + exact.wall_ms, 1),
            })

    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as f:
            writer = csv_mod.DictWriter(f, fieldnames=fieldnames)
            writer.writeheader()
            writer.writerows(rows)

    widths = {k: max(len(k), *(len(str(r[k])) for r in rows)) for k in fieldnames}
    print("  ".join(k.rjust(widths[k]) for k in fieldnames))
    for r in rows:
        print("  ".join(str(r[k]).rjust(widths[k]) for k in fieldnames))
    best = min(rows, key=lambda r: r["mean_float_ops"])
    print(f"\nminimum exact-query cost: H={best['H']} nmse_target={best['nmse_target']} "
          f"(mean_float_ops={best['mean_float_ops']})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="csvd",
                                  description="Clustered-SVD similarity search toolkit")
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a CSV/FVEC matrix into an FVEC dataset")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--dtype", choices=["f4", "f8"], default="f8")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("output")
    p.add_argument("--kind", choices=datasets.KINDS, required=True)
    p.add_argument("-M", "--num-points", type=int, required=True)
    p.add_argument("-N", "--num-features", type=int, required=True)
    p.add_argument("--clusters", type=int, default=3, help="generating cluster count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=None, help="lines: noise std")
    p.add_argument("--separation", type=float, default=None, help="blobs: center spacing")
    p.add_argument("--length", type=float, default=None, help="lines: segment length")
    p.add_argument("--dtype", choices=["f4", "f8"], default="f8")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("build", help="build a model plus within-cluster indexes")
    p.add_argument("dataset")
    p.add_argument("output")
    p.add_argument("--clusters", type=int, required=True)
    p.add_argument("--objective", choices=csvd_mod.OBJECTIVES, default="nmse")
    p.add_argument("--target", type=float, default=0.0)
    p.add_argument("--index", choices=["scan", "optree", "sdi"], default="scan")
    p.add_argument("--fanout", type=int, default=5)
    p.add_argument("--leaf-capacity", type=int, default=64)
    p.add_argument("--page-size", type=int, default=4096)
    p.add_argument("--variance-step", type=float, default=0.25)
    p.add_argument("--seeding", choices=["lbg", "furthest"], default="lbg")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("query", help="run batch k-NN queries, one NDJSON row per query")
    p.add_argument("model")
    p.add_argument("queries")
    p.add_argument("-k", type=int, required=True)
    p.add_argument("--mode", choices=["approx", "exact"], default="approx")
    p.add_argument("--dataset", default=None, help="original dataset (exact mode)")
    p.add_argument("--index", choices=["auto", "scan", "optree", "sdi"], default="auto")
    p.add_argument("--candidates", type=int, default=None,
                   help="approx mode: candidate-list size (default k)")
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("sweep", help="evaluate a grid of (clusters, loss-target) models")
    p.add_argument("dataset")
    p.add_argument("--clusters", default="1", help="comma-separated cluster counts")
    p.add_argument("--nmse", default="0.0", help="comma-separated loss targets")
    p.add_argument("-k", type=int, default=10)
    p.add_argument("--queries", default=None, help="query file (default: sampled rows)")
    p.add_argument("--num-queries", type=int, default=100)
    p.add_argument("--index", choices=["scan", "optree"], default="scan")
    p.add_argument("--out", default=None, help="CSV report path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_sweep)
    return top


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FormatError as exc:
        print(f"corrupt file: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
