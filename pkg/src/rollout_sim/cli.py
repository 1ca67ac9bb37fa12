"""Command-line entry point: ``rollout-sim <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import harness
from .clustering import (
    Clustering,
    dump_clustering,
    feature_clustering,
    greedy_min_cut,
    grid_clustering,
    load_clustering,
    load_features,
    random_balanced,
    single_cluster,
)
from .netgraph import lattice, read_edge_list, write_edge_list
from .outcomes import CoefficientModel, SymmetricSynthModel


def _load_graph(args):
    if getattr(args, "lattice", None):
        return lattice(args.lattice)
    g = read_edge_list(args.graph, directed=not args.undirected, compact=args.compact)
    return g[0] if isinstance(g, tuple) else g


def _load_model(text: str, graph):
    path = Path(text)
    data = json.loads(path.read_text(encoding="utf-8") if path.exists() else text)
    kind = data.pop("type", "symmetric")
    if kind == "symmetric":
        return SymmetricSynthModel.from_json(data, graph)
    if kind == "coefficients":
        return CoefficientModel.from_json(data, graph)
    raise SystemExit(f"unknown model type {kind!r}")


def _parse_clustering(text: str, graph, seed: int) -> Clustering:
    """``grid:B``, ``random:K``, ``greedy:K``, ``single`` or a clustering file path."""
    rng = np.random.default_rng(seed)
    method, _, arg = text.partition(":")
    if method == "grid":
        side = math.isqrt(graph.n)
        return grid_clustering(side, int(arg))
    if method == "random":
        return random_balanced(graph.n, int(arg), rng)
    if method == "greedy":
        return greedy_min_cut(graph, int(arg), rng)
    if method == "single":
        return single_cluster(graph.n)
    with open(text, encoding="utf-8") as fh:
        return load_clustering(fh, graph.n, name=Path(text).stem)


def cmd_lattice(args) -> int:
    write_edge_list(lattice(args.side), args.out)
    return 0


def cmd_metrics(args) -> int:
    graph = _load_graph(args)
    model = _load_model(args.model, graph)
    cls = [_parse_clustering(c, graph, args.seed) for c in args.clusterings]
    rows = harness.metrics_table(graph, model, cls)
    if args.json:
        print(json.dumps(rows, indent=2))
        return 0
    print(f"{'clustering':<16}{'n_c':>7}{'var_lbar':>14}{'cut_effect':>14}{'cut_edges':>11}")
    for r in rows:
        print(f"{r['clustering']:<16}{r['n_c']:>7}{r['var_lbar']:>14.6g}{r['cut_effect']:>14.6g}{r['cut_edges']:>11}")
    return 0


def cmd_sweep(args) -> int:
    cfg = harness.ExperimentConfig.load(args.config)
    if args.threads is not None:
        cfg.threads = args.threads
    out = args.out or cfg.out
    if not out:
        raise SystemExit("no output path: pass --out or set 'out' in the config")
    res = harness.sweep(cfg, out=out)
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"wrote {len(res.records)} rows to {out}")
    return 0


def cmd_verify(args) -> int:
    report = harness.verify(full=args.full, seed=args.seed)
    print("\n".join(report.lines()))
    return 0 if report.ok else 1


def cmd_cluster(args) -> int:
    graph = _load_graph(args)
    rng = np.random.default_rng(args.seed)
    if args.method == "grid":
        side = math.isqrt(graph.n)
        if side * side != graph.n:
            raise SystemExit("grid clustering needs a square lattice")
        block = math.isqrt(graph.n // args.nc)
        if block * block * args.nc != graph.n:
            raise SystemExit(f"{args.nc} clusters do not tile a {side}x{side} lattice with square blocks")
        cl = grid_clustering(side, block)
    elif args.method == "random":
        cl = random_balanced(graph.n, args.nc, rng)
    elif args.method == "greedy":
        cl = greedy_min_cut(graph, args.nc, rng, sweeps=args.sweeps)
    else:
        if not args.features:
            raise SystemExit("--features is required for the feature method")
        with open(args.features, encoding="utf-8") as fh:
            feats = load_features(fh, graph.n)
        cl = feature_clustering(feats, args.nc, rng, sweeps=args.sweeps)
    Path(args.out).write_text("\n".join(dump_clustering(cl)) + "\n", encoding="utf-8")
    return 0


def _graph_args(p: argparse.ArgumentParser, allow_lattice: bool) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--graph", help="edge list file")
    if allow_lattice:
        g.add_argument("--lattice", type=int, metavar="S", help="use an S x S lattice")
    p.add_argument("--undirected", action="store_true", help="read each edge in both directions")
    p.add_argument("--compact", action="store_true", help="relabel sparse node ids")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rollout-sim", description="Two-stage rollout experiments under network interference.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("lattice", help="write an S x S lattice edge list")
    p.add_argument("--side", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lattice)

    p = sub.add_parser("metrics", help="clustering metrics table")
    _graph_args(p, allow_lattice=True)
    p.add_argument("--model", required=True, help="model JSON (file path or inline)")
    p.add_argument("--clusterings", nargs="+", required=True, help="grid:B, random:K, greedy:K, single, or a file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("sweep", help="run a parameter sweep and write CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the oracle and identity checks")
    p.add_argument("--full", action="store_true", help="larger instances and higher orders")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("cluster", help="partition a graph and write node/cluster pairs")
    _graph_args(p, allow_lattice=False)
    p.add_argument("--method", choices=["grid", "random", "greedy", "feature"], required=True)
    p.add_argument("--nc", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--features", help="node feature file for --method feature")
    p.add_argument("--sweeps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_cluster)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
