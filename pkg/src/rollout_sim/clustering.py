"""Partitions of the node set and partition-level metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .netgraph import InterferenceGraph

log = logging.getLogger(__name__)

# dense per-node/per-cluster weight table used by the swap search
_MAX_DENSE_CELLS = 100_000_000


@dataclass(frozen=True, eq=False)
class Clustering:
    """A partition of ``[n]`` into ``n_c`` clusters labelled ``0..n_c-1``."""

    assign: np.ndarray
    name: str = ""
    members: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        assign = np.asarray(self.assign, dtype=np.int64)
        if assign.ndim != 1:
            raise ValueError("assign must be one-dimensional")
        if len(assign) and assign.min() < 0:
            raise ValueError("cluster ids must be nonnegative")
        labels = np.unique(assign)
        if len(labels) and (labels[0] != 0 or labels[-1] != len(labels) - 1):
            # relabel to dense ids in sorted-label order
            assign = np.searchsorted(labels, assign)
        assign.setflags(write=False)
        object.__setattr__(self, "assign", assign)
        order = np.argsort(assign, kind="stable")
        bounds = np.searchsorted(assign[order], np.arange(len(labels) + 1))
        members = [order[bounds[c] : bounds[c + 1]] for c in range(len(labels))]
        object.__setattr__(self, "members", members)

    @property
    def n(self) -> int:
        return len(self.assign)

    @property
    def n_c(self) -> int:
        return len(self.members)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(m) for m in self.members], dtype=np.int64)

    @property
    def equal_size(self) -> bool:
        return self.n_c > 0 and self.n % self.n_c == 0 and bool(np.all(self.sizes == self.n // self.n_c))

    def cluster_of(self, i: int) -> int:
        return int(self.assign[i])

    def membership(self) -> sp.csr_matrix:
        """``n x n_c`` indicator matrix."""
        return sp.csr_matrix(
            (np.ones(self.n), (np.arange(self.n), self.assign)), shape=(self.n, self.n_c)
        )

    def __eq__(self, other):
        if not isinstance(other, Clustering):
            return NotImplemented
        return np.array_equal(self.assign, other.assign)

    __hash__ = None


def single_cluster(n: int) -> Clustering:
    return Clustering(np.zeros(n, dtype=np.int64), name="single")


def singletons(n: int) -> Clustering:
    return Clustering(np.arange(n), name="singletons")


def _check_divides(n: int, n_c: int) -> None:
    if n_c < 1 or n % n_c:
        raise ValueError(f"cluster count {n_c} does not divide n={n}")


def grid_clustering(side: int, block: int) -> Clustering:
    """Contiguous ``block x block`` tiles over a ``side x side`` lattice."""
    if block < 1 or side % block:
        raise ValueError(f"block {block} does not divide side {side}")
    r, c = np.divmod(np.arange(side * side), side)
    per_row = side // block
    return Clustering((r // block) * per_row + c // block, name=f"grid{block}")


def random_balanced(n: int, n_c: int, rng: np.random.Generator) -> Clustering:
    """Uniformly random partition into ``n_c`` equal-size clusters."""
    _check_divides(n, n_c)
    assign = np.empty(n, dtype=np.int64)
    assign[rng.permutation(n)] = np.repeat(np.arange(n_c), n // n_c)
    return Clustering(assign, name=f"random{n_c}")


def cut_weight(weights: sp.spmatrix, assign: np.ndarray) -> float:
    """Total weight of unordered pairs split across clusters, for symmetric ``weights``."""
    w = sp.coo_matrix(weights)
    mask = (assign[w.row] != assign[w.col]) & (w.row < w.col)
    return float(w.data[mask].sum())


def _swap_search(weights: sp.csr_matrix, assign: np.ndarray, n_c: int, sweeps: int) -> np.ndarray:
    """Pairwise-swap local search on a symmetric, zero-diagonal weight matrix.

    Each pass visits nodes in id order; for node ``u`` the first partner ``v``
    (in id order, among members of clusters adjacent to ``u``) whose swap
    strictly lowers the cut is taken. Stops after ``sweeps`` passes or at a
    local optimum.
    """
    n = len(assign)
    if n * n_c > _MAX_DENSE_CELLS:
        raise MemoryError(f"swap search table {n}x{n_c} too large")
    assign = assign.copy()
    w = weights.tocsr()
    # wc[v, c] = total weight from v into cluster c
    wc = np.zeros((n, n_c), dtype=np.float64)
    rows = np.repeat(np.arange(n), np.diff(w.indptr))
    np.add.at(wc, (rows, assign[w.indices]), w.data)
    members = [set(np.flatnonzero(assign == c).tolist()) for c in range(n_c)]

    for _ in range(sweeps):
        improved = False
        for u in range(n):
            a = assign[u]
            lo, hi = w.indptr[u], w.indptr[u + 1]
            nb, nw = w.indices[lo:hi], w.data[lo:hi]
            if not len(nb):
                continue
            adjacent = np.unique(assign[nb])
            adjacent = adjacent[adjacent != a]
            if not len(adjacent):
                continue
            cand = np.sort(np.fromiter((v for b in adjacent for v in members[b]), dtype=np.int64))
            if not len(cand):
                continue
            b_of = assign[cand]
            w_uv = np.zeros(len(cand))
            pos = {int(v): k for k, v in enumerate(cand)}
            for j, x in zip(nb, nw):
                k = pos.get(int(j))
                if k is not None:
                    w_uv[k] = x
            gain = (wc[u, b_of] - wc[u, a]) + (wc[cand, a] - wc[cand, b_of]) - 2.0 * w_uv
            hits = np.flatnonzero(gain > 1e-12)
            if not len(hits):
                continue
            v = int(cand[hits[0]])
            b = int(assign[v])
            _move(w, wc, assign, u, a, b)
            _move(w, wc, assign, v, b, a)
            members[a].discard(u)
            members[b].add(u)
            members[b].discard(v)
            members[a].add(v)
            improved = True
        if not improved:
            break
    return assign


def _move(w: sp.csr_matrix, wc: np.ndarray, assign: np.ndarray, x: int, src: int, dst: int) -> None:
    lo, hi = w.indptr[x], w.indptr[x + 1]
    nb, nw = w.indices[lo:hi], w.data[lo:hi]
    np.subtract.at(wc[:, src], nb, nw)
    np.add.at(wc[:, dst], nb, nw)
    assign[x] = dst


def greedy_min_cut(
    graph: InterferenceGraph, n_c: int, rng: np.random.Generator, sweeps: int = 50
) -> Clustering:
    """Balanced partition from a random start refined by cut-reducing swaps."""
    _check_divides(graph.n, n_c)
    start = random_balanced(graph.n, n_c, rng).assign
    assign = _swap_search(graph.undirected_weights(), start, n_c, sweeps)
    return Clustering(assign, name=f"greedy{n_c}")


def feature_clustering(
    features: Sequence[Iterable], n_c: int, rng: np.random.Generator, sweeps: int = 50
) -> Clustering:
    """Cluster by shared feature labels.

    If every node carries exactly one feature and the feature classes are
    exactly the requested size, the classes are returned (ordered by first
    appearance). Otherwise nodes are partitioned by swap search on the
    feature-overlap graph, ``w(i, j) = |F_i & F_j|``.
    """
    n = len(features)
    _check_divides(n, n_c)
    feats = [list(dict.fromkeys(f)) for f in features]
    if all(len(f) == 1 for f in feats):
        labels = [f[0] for f in feats]
        order = list(dict.fromkeys(labels))
        if len(order) == n_c:
            idx = {lab: k for k, lab in enumerate(order)}
            assign = np.array([idx[lab] for lab in labels], dtype=np.int64)
            cl = Clustering(assign, name=f"feature{n_c}")
            if cl.equal_size:
                return cl

    vocab: dict = {}
    rows, cols = [], []
    for i, f in enumerate(feats):
        if not f:
            f = [("__dummy__", i)]
        for x in f:
            rows.append(i)
            cols.append(vocab.setdefault(x, len(vocab)))
    inc = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, len(vocab)))
    overlap = (inc @ inc.T).tocsr()
    overlap.setdiag(0)
    overlap.eliminate_zeros()
    start = random_balanced(n, n_c, rng).assign
    assign = _swap_search(overlap, start, n_c, sweeps)
    return Clustering(assign, name=f"feature{n_c}")


def cut_edges(graph: InterferenceGraph, clustering: Clustering) -> int:
    """Directed non-self edges ``j -> i`` with ``pi(j) != pi(i)``."""
    if clustering.n != graph.n:
        raise ValueError("clustering and graph sizes differ")
    dst = np.repeat(np.arange(graph.n), graph.degrees)
    return int(np.count_nonzero(clustering.assign[graph.indices] != clustering.assign[dst]))


def pi_count(clustering: Clustering, nodes: Iterable[int]) -> int:
    """Number of distinct clusters touched by a nonempty node set."""
    nodes = list(nodes)
    if not nodes:
        raise ValueError("node set must be nonempty")
    return len(set(clustering.assign[nodes].tolist()))


def var_hat(values) -> float:
    """Population-style empirical variance ``mean(v^2) - mean(v)^2``.

    Exact when ``values`` holds ``Fraction`` objects.
    """
    vals = list(values) if not isinstance(values, np.ndarray) else values
    if len(vals) == 0:
        raise ValueError("var_hat of empty input")
    if isinstance(vals, np.ndarray) and vals.dtype != object:
        v = vals.astype(np.float64)
        return float(np.mean((v - v.mean()) ** 2))
    m = len(vals)
    mean = sum(vals) / m
    return sum((x - mean) ** 2 for x in vals) / m


# -- file formats ----------------------------------------------------------


def load_clustering(lines: Iterable[str], n: int | None = None, name: str = "") -> Clustering:
    """Read ``node_id cluster_id`` lines; every node in ``0..n-1`` must be assigned once."""
    pairs: dict[int, int] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 'node_id cluster_id'")
        i, c = int(parts[0]), int(parts[1])
        if i in pairs:
            raise ValueError(f"line {lineno}: node {i} assigned twice")
        pairs[i] = c
    size = n if n is not None else (max(pairs) + 1 if pairs else 0)
    if sorted(pairs) != list(range(size)):
        raise ValueError("clustering file does not cover every node exactly once")
    return Clustering(np.array([pairs[i] for i in range(size)], dtype=np.int64), name=name)


def dump_clustering(clustering: Clustering) -> list[str]:
    return [f"{i} {c}" for i, c in enumerate(clustering.assign.tolist())]


def load_features(lines: Iterable[str], n: int | None = None) -> list[list[str]]:
    """Read ``node_id feat_id [feat_id ...]`` lines into per-node feature lists."""
    feats: dict[int, list[str]] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            i = int(parts[0])
        except ValueError:
            raise ValueError(f"line {lineno}: bad node id {parts[0]!r}")
        feats.setdefault(i, []).extend(parts[1:])
    size = n if n is not None else (max(feats) + 1 if feats else 0)
    return [feats.get(i, []) for i in range(size)]


def dump_features(features: Sequence[Sequence]) -> list[str]:
    return [" ".join([str(i), *map(str, f)]) for i, f in enumerate(features)]
