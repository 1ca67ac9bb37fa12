"""Low-order potential outcomes models under neighborhood interference.

Two forms share one interface:

* :class:`CoefficientModel` stores ``c[i][S]`` explicitly for every subset
  ``S`` of node ``i``'s in-neighborhood with ``|S| <= beta``. Coefficients may
  be ``Fraction`` objects, in which case the aggregate quantities (``tte``,
  ``cluster_influence``, ``size_profile``...) are computed exactly.
* :class:`SymmetricSynthModel` is the degree-scaled synthetic response model
  where every size-``k`` subset of ``N_i`` carries ``y0[i] * gamma_k / C(d_i, k)``
  and the self singleton adds a direct effect ``y0[i] * delta``. It is
  evaluated lazily from treated-neighbor counts.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import comb

from .clustering import Clustering, var_hat
from .netgraph import InterferenceGraph

MATERIALIZE_LIMIT = 10_000_000


class OutcomesModel:
    """Shared behaviour; subclasses provide evaluation and the per-subset data."""

    graph: InterferenceGraph
    beta: int

    @property
    def n(self) -> int:
        return self.graph.n

    def evaluate(self, z) -> np.ndarray:
        raise NotImplementedError

    def size_profile(self, clustering: Clustering | None = None) -> dict[tuple[int, int], object]:
        """Sum of ``c[i][S]`` over nonempty ``S`` grouped by ``(|S|, |Pi(S)|)``.

        With no clustering every node is its own cluster, so ``|Pi(S)| = |S|``.
        """
        raise NotImplementedError

    def cluster_influence(self, clustering: Clustering) -> list | np.ndarray:
        raise NotImplementedError

    def tte(self):
        return sum(self.size_profile().values()) / self.n

    def cut_effect(self, clustering: Clustering):
        """Average effect of subsets spanning two or more clusters."""
        lbar = self.cluster_influence(clustering)
        return self.tte() - sum(lbar) / clustering.n_c

    def cluster_influence_variance(self, clustering: Clustering):
        return var_hat(self.cluster_influence(clustering))

    def _check_z(self, z) -> np.ndarray:
        z = np.asarray(z)
        if z.shape[0] != self.n or z.ndim not in (1, 2):
            raise ValueError(f"treatment vector must have leading length {self.n}, got {z.shape}")
        return z


# -- explicit coefficients ----------------------------------------------------


def _parse_value(v):
    if isinstance(v, str):
        return Fraction(v)
    return v


class CoefficientModel(OutcomesModel):
    """Explicit ``c[i][S]`` table; ``S`` keys are sorted tuples (``()`` is the baseline)."""

    def __init__(self, graph: InterferenceGraph, beta: int, coeffs: Sequence[Mapping[Iterable[int], object]]):
        if len(coeffs) != graph.n:
            raise ValueError("need one coefficient map per node")
        self.graph = graph
        self.beta = int(beta)
        table: list[dict[tuple[int, ...], object]] = []
        for i, ci in enumerate(coeffs):
            nb = set(graph.nbrs(i).tolist())
            row: dict[tuple[int, ...], object] = {}
            for s, v in ci.items():
                key = tuple(sorted(set(int(j) for j in s)))
                if len(key) > self.beta:
                    raise ValueError(f"node {i}: subset {key} larger than beta={self.beta}")
                if not nb.issuperset(key):
                    raise ValueError(f"node {i}: subset {key} not inside its in-neighborhood")
                row[key] = row.get(key, 0) + v
            table.append(dict(sorted(row.items(), key=lambda kv: (len(kv[0]), kv[0]))))
        self.coeffs = table
        self._flat = self._flatten()

    def _flatten(self):
        groups: dict[int, tuple[list, list, list]] = defaultdict(lambda: ([], [], []))
        for i, row in enumerate(self.coeffs):
            for s, v in row.items():
                g = groups[len(s)]
                g[0].append(i)
                g[1].append(s)
                g[2].append(float(v))
        flat = {}
        for k, (nodes, subsets, vals) in groups.items():
            members = np.array(subsets, dtype=np.int64).reshape(len(subsets), k)
            flat[k] = (np.array(nodes, dtype=np.int64), members, np.array(vals))
        return flat

    def items(self):
        """Yield ``(i, S, c)`` for every stored coefficient."""
        for i, row in enumerate(self.coeffs):
            for s, v in row.items():
                yield i, s, v

    @property
    def nonnegative(self) -> bool:
        return all(v >= 0 for _, _, v in self.items())

    def evaluate(self, z) -> np.ndarray:
        z = self._check_z(z).astype(np.float64)
        out = np.zeros(z.shape, dtype=np.float64)
        for k, (nodes, members, vals) in self._flat.items():
            if k == 0:
                term = np.ones((len(nodes),) + z.shape[1:])
            else:
                term = np.prod(z[members], axis=1)
            term = term * (vals if z.ndim == 1 else vals[:, None])
            np.add.at(out, nodes, term)
        return out

    def baseline(self) -> list:
        return [row.get((), 0) for row in self.coeffs]

    def size_profile(self, clustering: Clustering | None = None):
        prof: dict[tuple[int, int], object] = defaultdict(int)
        for _, s, v in self.items():
            if not s:
                continue
            r = len(s) if clustering is None else len(set(clustering.assign[list(s)].tolist()))
            prof[(len(s), r)] += v
        return dict(prof)

    def influence_L(self) -> list:
        """Total outgoing singleton effect ``L_j`` of treating each node."""
        out = [0] * self.n
        for _, s, v in self.items():
            if len(s) == 1:
                out[s[0]] += v
        return out

    def influence_subset(self, subset: Iterable[int]):
        key = tuple(sorted(set(subset)))
        return sum(row.get(key, 0) for row in self.coeffs)

    def cluster_influence(self, clustering: Clustering) -> list:
        if clustering.n != self.n:
            raise ValueError("clustering size does not match model")
        out = [0] * clustering.n_c
        for _, s, v in self.items():
            if not s:
                continue
            cs = set(clustering.assign[list(s)].tolist())
            if len(cs) == 1:
                out[cs.pop()] += v
        scale = Fraction(clustering.n_c, self.n)
        if any(isinstance(x, float) for x in out):
            scale = float(scale)
        return [x * scale for x in out]

    def y_max(self):
        return max(sum(abs(v) for v in row.values()) for row in self.coeffs)

    # -- serialization ------------------------------------------------------

    def to_json(self) -> dict:
        def enc(v):
            return str(v) if isinstance(v, Fraction) else v

        return {
            "beta": self.beta,
            "nodes": [
                {"id": i, "coeffs": [{"subset": list(s), "c": enc(v)} for s, v in row.items()]}
                for i, row in enumerate(self.coeffs)
            ],
        }

    @classmethod
    def from_json(cls, data: Mapping, graph: InterferenceGraph | None = None) -> "CoefficientModel":
        nodes = sorted(data["nodes"], key=lambda d: d["id"])
        if [d["id"] for d in nodes] != list(range(len(nodes))):
            raise ValueError("node ids must be 0..n-1")
        coeffs = [{tuple(c["subset"]): _parse_value(c["c"]) for c in d["coeffs"]} for d in nodes]
        if graph is None:
            graph = InterferenceGraph.from_in_nbrs(
                [set(j for s in ci for j in s) for ci in coeffs]
            )
        return cls(graph, data["beta"], coeffs)


def random_coefficient_model(
    graph: InterferenceGraph,
    beta: int,
    rng: np.random.Generator,
    rational: bool = True,
    nonneg: bool = True,
    density: float = 1.0,
    denom: int = 8,
) -> CoefficientModel:
    """Random model with every allowed subset present with probability ``density``."""
    coeffs = []
    for i in range(graph.n):
        row = {}
        nb = graph.nbrs(i).tolist()
        for k in range(0, min(beta, len(nb)) + 1):
            for s in itertools.combinations(nb, k):
                if k and rng.random() > density:
                    continue
                lo = 0 if nonneg else -denom
                num = int(rng.integers(lo, 2 * denom + 1))
                row[s] = Fraction(num, denom) if rational else num / denom + rng.random() * 1e-3
        coeffs.append(row)
    return CoefficientModel(graph, beta, coeffs)


# -- symmetric synthetic model ----------------------------------------------


def homophily_vector(graph: InterferenceGraph, tol: float = 1e-8) -> np.ndarray:
    """Fiedler vector of the symmetrized graph Laplacian, mapped affinely onto ``[-1, 1]``."""
    w = graph.undirected_weights()
    w.data[:] = 1.0
    lap = sp.diags(np.asarray(w.sum(axis=1)).ravel()) - w
    n = graph.n
    if n < 2:
        return np.zeros(n)
    if n <= 2000:
        _, vecs = np.linalg.eigh(lap.toarray())
        vec = vecs[:, 1]
    else:
        from scipy.sparse.linalg import eigsh

        vals, vecs = eigsh(lap.tocsc(), k=2, sigma=-1e-3, which="LM", tol=tol, maxiter=100_000)
        vec = vecs[:, np.argsort(vals)[1]]
    lo, hi = vec.min(), vec.max()
    if hi - lo < 1e-15:
        return np.zeros(n)
    h = 2.0 * (vec - lo) / (hi - lo) - 1.0
    # eigenvector sign is arbitrary; pin node 0 to the nonpositive side
    if h[0] > 0:
        h = -h
    return h


class SymmetricSynthModel(OutcomesModel):
    """Degree-scaled response model with decaying subset effects.

    ``Y_i(z) = y0[i] * (1 + delta*z_i + sum_k gamma_k * C(t_i, k) / C(d_i, k))``
    where ``t_i`` counts treated in-neighbors and
    ``y0[i] = (a + b*h[i] + eps_i) * d_i / d_bar``. Terms with ``k > d_i`` vanish.
    """

    def __init__(
        self,
        graph: InterferenceGraph,
        beta: int = 3,
        a: float = 1.0,
        b: float = 0.0,
        sigma: float = 0.1,
        delta: float = 0.5,
        gamma: Sequence[float] | None = None,
        seed: int | None = 0,
    ):
        if beta < 1:
            raise ValueError("beta must be >= 1")
        self.graph = graph
        self.beta = int(beta)
        self.a, self.b, self.sigma, self.delta = float(a), float(b), float(sigma), float(delta)
        self.gamma = np.array(
            [0.5 ** (k - 1) for k in range(1, beta + 1)] if gamma is None else gamma, dtype=np.float64
        )
        if len(self.gamma) != self.beta:
            raise ValueError("gamma needs one entry per subset size 1..beta")
        self.seed = seed
        deg = graph.degrees.astype(np.float64)
        self.h = homophily_vector(graph) if self.b != 0 else np.zeros(graph.n)
        rng = np.random.default_rng(seed)
        self.eps = rng.normal(0.0, self.sigma, graph.n) if self.sigma > 0 else np.zeros(graph.n)
        self.y0 = (self.a + self.b * self.h + self.eps) * deg / graph.d_bar
        # weight[i, k-1] = gamma_k / C(d_i, k), zero where k > d_i
        ks = np.arange(1, self.beta + 1)
        binom = comb(deg[:, None], ks[None, :])
        self._w = np.where(ks[None, :] <= deg[:, None], self.gamma[None, :] / np.maximum(binom, 1), 0.0)

    @property
    def nonnegative(self) -> bool:
        return bool(
            np.all(self.y0 >= 0) and np.all(self.gamma >= 0) and np.all(self.delta + self._w[:, 0] >= 0)
        )

    def spec_json(self) -> dict:
        return {
            "beta": self.beta,
            "a": self.a,
            "b": self.b,
            "sigma": self.sigma,
            "delta": self.delta,
            "gamma": self.gamma.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: Mapping, graph: InterferenceGraph) -> "SymmetricSynthModel":
        return cls(
            graph,
            beta=data.get("beta", 3),
            a=data.get("a", 1.0),
            b=data.get("b", 0.0),
            sigma=data.get("sigma", 0.1),
            delta=data.get("delta", 0.5),
            gamma=data.get("gamma"),
            seed=data.get("seed", 0),
        )

    def evaluate(self, z) -> np.ndarray:
        z = self._check_z(z).astype(np.float64)
        t = self.graph.adjacency @ z
        if z.ndim == 1:
            acc = 1.0 + self.delta * z
            for k in range(1, self.beta + 1):
                acc += self._w[:, k - 1] * comb(t, k)
            return self.y0 * acc
        acc = 1.0 + self.delta * z
        for k in range(1, self.beta + 1):
            acc += self._w[:, k - 1 : k] * comb(t, k)
        return self.y0[:, None] * acc

    def baseline(self) -> np.ndarray:
        return self.y0.copy()

    def tte(self) -> float:
        return float(np.mean(self.y0 * (self.delta + self._gamma_total())))

    def _gamma_total(self) -> np.ndarray:
        """Per-node ``sum_k gamma_k`` over sizes that fit inside the neighborhood."""
        deg = self.graph.degrees
        ks = np.arange(1, self.beta + 1)
        return (self.gamma[None, :] * (ks[None, :] <= deg[:, None])).sum(axis=1)

    def influence_L(self) -> np.ndarray:
        return self.graph.adjacency.T @ (self.y0 * self._w[:, 0]) + self.delta * self.y0

    def influence_subset(self, subset: Iterable[int]) -> float:
        s = sorted(set(subset))
        k = len(s)
        if k == 0 or k > self.beta:
            return 0.0
        holders = np.flatnonzero(
            np.asarray(self.graph.adjacency[:, s].sum(axis=1)).ravel() == k
        )
        total = float(np.sum(self.y0[holders] * self._w[holders, k - 1]))
        if k == 1:
            total += self.delta * self.y0[s[0]]
        return total

    def _cluster_counts(self, clustering: Clustering) -> sp.coo_matrix:
        if clustering.n != self.n:
            raise ValueError("clustering size does not match model")
        return sp.coo_matrix(self.graph.adjacency @ clustering.membership())

    def cluster_influence(self, clustering: Clustering) -> np.ndarray:
        m = self._cluster_counts(clustering)
        contrib = np.zeros(len(m.data))
        for k in range(1, self.beta + 1):
            contrib += self._w[m.row, k - 1] * comb(m.data, k)
        contrib *= self.y0[m.row]
        sums = np.bincount(m.col, weights=contrib, minlength=clustering.n_c)
        sums += np.bincount(clustering.assign, weights=self.delta * self.y0, minlength=clustering.n_c)
        return sums * (clustering.n_c / self.n)

    def size_profile(self, clustering: Clustering | None = None):
        prof: dict[tuple[int, int], float] = defaultdict(float)
        deg = self.graph.degrees
        # the direct effect lives on the self singleton
        prof[(1, 1)] += float(np.sum(self.y0 * self.delta))
        if clustering is None:
            for k in range(1, self.beta + 1):
                mask = deg >= k
                prof[(k, k)] += float(np.sum(self.y0[mask] * self._w[mask, k - 1] * comb(deg[mask], k)))
            return dict(prof)
        m = sp.csr_matrix(self._cluster_counts(clustering))
        cache: dict[tuple[int, ...], np.ndarray] = {}
        acc = np.zeros((self.beta + 1, self.beta + 1))
        for i in range(self.n):
            mult = tuple(sorted(m.data[m.indptr[i] : m.indptr[i + 1]].astype(int).tolist()))
            counts = cache.get(mult)
            if counts is None:
                counts = cache[mult] = subset_cluster_counts(mult, self.beta)
            for k in range(1, self.beta + 1):
                acc[k] += self.y0[i] * self._w[i, k - 1] * counts[k]
        for k in range(1, self.beta + 1):
            for r in range(1, k + 1):
                if acc[k, r]:
                    prof[(k, r)] += float(acc[k, r])
        return dict(prof)

    def y_max(self) -> float:
        deg = self.graph.degrees.astype(np.float64)
        w1 = self._w[:, 0]
        higher = (np.abs(self.gamma[None, 1:]) * (np.arange(2, self.beta + 1)[None, :] <= deg[:, None])).sum(axis=1)
        per_node = np.abs(self.y0) * (1.0 + np.abs(self.delta + w1) + (deg - 1) * np.abs(w1) + higher)
        return float(per_node.max())


def subset_cluster_counts(multiplicities: Sequence[int], beta: int) -> np.ndarray:
    """``out[k, r]`` = number of ``k``-subsets drawn from groups of the given sizes that touch ``r`` groups.

    Counts come from expanding ``prod_g (1 + y * sum_{j>=1} C(m_g, j) x^j)``.
    """
    poly = np.zeros((beta + 1, beta + 1))
    poly[0, 0] = 1.0
    for mg in multiplicities:
        nxt = poly.copy()
        for j in range(1, min(mg, beta) + 1):
            c = math.comb(mg, j)
            nxt[j:, 1:] += c * poly[: beta + 1 - j, :beta]
        poly = nxt
    return poly


def materialize(model: SymmetricSynthModel, limit: int = MATERIALIZE_LIMIT) -> CoefficientModel:
    """Expand the lazy symmetric model into an explicit coefficient table."""
    deg = model.graph.degrees
    total = sum(math.comb(int(d), k) for d in deg for k in range(model.beta + 1))
    if total > limit:
        raise ValueError(f"materializing needs {total} subsets, above the limit {limit}")
    coeffs = []
    for i in range(model.n):
        nb = model.graph.nbrs(i).tolist()
        y0 = float(model.y0[i])
        row = {(): y0}
        for k in range(1, min(model.beta, len(nb)) + 1):
            w = y0 * float(model._w[i, k - 1])
            for s in itertools.combinations(nb, k):
                row[s] = w
        row[(i,)] = row[(i,)] + y0 * model.delta
        coeffs.append(row)
    return CoefficientModel(model.graph, model.beta, coeffs)


def influence_L(model: OutcomesModel):
    return model.influence_L()


def cluster_influence(model: OutcomesModel, clustering: Clustering):
    return model.cluster_influence(clustering)


def cut_effect(model: OutcomesModel, clustering: Clustering):
    return model.cut_effect(clustering)


def tte(model: OutcomesModel):
    return model.tte()


def y_max(model: OutcomesModel):
    return model.y_max()
