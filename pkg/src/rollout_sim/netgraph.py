"""Directed interference networks with mandatory self-loops.

Node ``j`` appears in ``in_nbrs[i]`` when ``j``'s treatment affects ``i``.
Every node is its own in-neighbor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class EdgeListError(ValueError):
    """Raised for malformed or unusable edge-list input."""


@dataclass(frozen=True, eq=False)
class InterferenceGraph:
    """Immutable in-neighborhood structure stored in CSR form.

    ``indices[indptr[i]:indptr[i+1]]`` is the sorted in-neighborhood of ``i``.
    Use :meth:`from_in_nbrs` rather than calling the constructor directly.
    """

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    _adj: sp.csr_matrix = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        adj = sp.csr_matrix(
            (np.ones(len(self.indices), dtype=np.float64), self.indices, self.indptr),
            shape=(self.n, self.n),
        )
        object.__setattr__(self, "_adj", adj)
        self.indptr.setflags(write=False)
        self.indices.setflags(write=False)

    @classmethod
    def from_in_nbrs(cls, in_nbrs: Sequence[Iterable[int]]) -> "InterferenceGraph":
        n = len(in_nbrs)
        rows = []
        for i, nb in enumerate(in_nbrs):
            s = set(int(j) for j in nb)
            s.add(i)
            if s and (min(s) < 0 or max(s) >= n):
                raise ValueError(f"node {i} has an in-neighbor outside [0, {n})")
            rows.append(np.array(sorted(s), dtype=np.int64))
        indptr = np.zeros(n + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(r) for r in rows])
        indices = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        return cls(n, indptr, indices)

    @classmethod
    def from_edges(cls, n: int, src: np.ndarray, dst: np.ndarray) -> "InterferenceGraph":
        """Build from directed edges ``src -> dst``; self-loops are added, duplicates dropped."""
        src = np.concatenate([np.asarray(src, dtype=np.int64), np.arange(n)])
        dst = np.concatenate([np.asarray(dst, dtype=np.int64), np.arange(n)])
        if len(src) and (src.min() < 0 or dst.min() < 0 or max(src.max(), dst.max()) >= n):
            raise ValueError("edge endpoint outside node range")
        m = sp.csr_matrix((np.ones(len(src)), (dst, src)), shape=(n, n))
        m.sum_duplicates()
        m.sort_indices()
        return cls(n, m.indptr.astype(np.int64), m.indices.astype(np.int64))

    # -- structure ---------------------------------------------------------

    def nbrs(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    @cached_property
    def in_nbrs(self) -> list[list[int]]:
        return [self.nbrs(i).tolist() for i in range(self.n)]

    @cached_property
    def degrees(self) -> np.ndarray:
        """In-degree of every node, self-loop included."""
        return np.diff(self.indptr)

    @property
    def d(self) -> int:
        return int(self.degrees.max()) if self.n else 0

    @property
    def d_bar(self) -> float:
        return float(self.degrees.mean()) if self.n else 0.0

    @property
    def num_edges(self) -> int:
        """Directed edge count including self-loops."""
        return int(self.indptr[-1])

    @property
    def adjacency(self) -> sp.csr_matrix:
        """Row ``i`` has ones at the columns of ``in_nbrs[i]``."""
        return self._adj

    def edges(self) -> np.ndarray:
        """Directed edges as an ``(m, 2)`` array of ``(src, dst)``, self-loops included."""
        dst = np.repeat(np.arange(self.n), self.degrees)
        return np.column_stack([self.indices, dst])

    def undirected_weights(self) -> sp.csr_matrix:
        """Symmetric weights ``w(u, v)`` = number of directed edges between ``u`` and ``v``."""
        a = self._adj.copy()
        a.setdiag(0)
        a.eliminate_zeros()
        return (a + a.T).tocsr()

    def __eq__(self, other):
        if not isinstance(other, InterferenceGraph):
            return NotImplemented
        return (
            self.n == other.n
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )

    __hash__ = None


def lattice(side: int) -> InterferenceGraph:
    """Non-toroidal ``side x side`` 4-neighbor grid, both edge directions plus self-loops.

    Node ``r * side + c`` sits at row ``r``, column ``c``.
    """
    if side < 1:
        raise ValueError("side must be >= 1")
    ids = np.arange(side * side).reshape(side, side)
    horiz = np.column_stack([ids[:, :-1].ravel(), ids[:, 1:].ravel()])
    vert = np.column_stack([ids[:-1, :].ravel(), ids[1:, :].ravel()])
    pairs = np.concatenate([horiz, vert])
    src = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    return InterferenceGraph.from_edges(side * side, src, dst)


def _parse_edge_lines(lines: Iterable[str]):
    src, dst, declared_n = [], [], None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "nodes" and declared_n is None:
                try:
                    declared_n = int(parts[1])
                except ValueError:
                    raise EdgeListError(f"line {lineno}: bad node-count header {line!r}")
            continue
        parts = line.split()
        if len(parts) != 2:
            raise EdgeListError(f"line {lineno}: expected 'src dst', got {line!r}")
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError:
            raise EdgeListError(f"line {lineno}: non-integer node id in {line!r}")
        if a < 0 or b < 0:
            raise EdgeListError(f"line {lineno}: negative node id in {line!r}")
        src.append(a)
        dst.append(b)
    return src, dst, declared_n


def load_edge_list(
    lines: Iterable[str],
    directed: bool = True,
    n: int | None = None,
    compact: bool = False,
):
    """Read a ``src dst`` edge list.

    Ids must be dense (every id in ``0..max_id`` used) unless the node count is
    given via ``n`` or a ``# nodes N`` header. With ``compact=True`` ids are
    relabeled to ``0..k-1`` in sorted order and ``(graph, mapping)`` is
    returned, ``mapping[new_id] = old_id``.
    """
    src, dst, declared_n = _parse_edge_lines(lines)
    if n is None:
        n = declared_n
    if not src and n is None:
        raise EdgeListError("empty edge list")
    src_a = np.asarray(src, dtype=np.int64)
    dst_a = np.asarray(dst, dtype=np.int64)
    if not directed:
        src_a, dst_a = np.concatenate([src_a, dst_a]), np.concatenate([dst_a, src_a])

    if compact:
        mapping = np.unique(np.concatenate([src_a, dst_a]))
        g = InterferenceGraph.from_edges(
            len(mapping), np.searchsorted(mapping, src_a), np.searchsorted(mapping, dst_a)
        )
        return g, mapping

    max_id = int(max(src_a.max(), dst_a.max())) if len(src_a) else -1
    if n is None:
        used = np.unique(np.concatenate([src_a, dst_a]))
        if len(used) != max_id + 1:
            missing = sorted(set(range(max_id + 1)) - set(used.tolist()))[:5]
            raise EdgeListError(
                f"sparse node ids (e.g. {missing} unused); pass compact=True to relabel"
            )
        n = max_id + 1
    elif max_id >= n:
        raise EdgeListError(f"node id {max_id} exceeds declared node count {n}")
    return InterferenceGraph.from_edges(n, src_a, dst_a)


def dump_edge_list(graph: InterferenceGraph) -> list[str]:
    """Serialize as directed ``src dst`` lines; self-loops are implicit and omitted."""
    out = [f"# nodes {graph.n}"]
    for s, t in graph.edges():
        if s != t:
            out.append(f"{s} {t}")
    return out


def read_edge_list(path, directed: bool = True, compact: bool = False):
    with open(path, encoding="utf-8") as fh:
        return load_edge_list(fh, directed=directed, compact=compact)


def write_edge_list(graph: InterferenceGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(dump_edge_list(graph)) + "\n")
