"""Total-treatment-effect estimators.

The interpolation estimators only need the per-round outcome totals. The
baselines (difference in means, thresholded DM, Horvitz-Thompson, Hajek) use
the final round's per-unit outcomes and assignment, and the IPW pair computes
exposure probabilities for a one-stage ``CRD(pn, n)`` assignment.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Sequence

import mpmath
import numpy as np

from .design import as_fraction
from .netgraph import InterferenceGraph


class UndefinedEstimate(ArithmeticError):
    """The estimator has an empty comparison group for this realization."""


@dataclass
class RolloutObservations:
    sums: Sequence
    n: int
    final_z: np.ndarray | None = None
    per_node_final: np.ndarray | None = None

    def __post_init__(self):
        if self.per_node_final is not None and len(self.per_node_final) != self.n:
            raise ValueError("per_node_final must have one entry per unit")

    @property
    def steps(self) -> int:
        return len(self.sums) - 1

    @classmethod
    def from_rollout(cls, model, realization) -> "RolloutObservations":
        zs = realization.z_all()
        ys = model.evaluate(zs.T)
        return cls(list(ys.sum(axis=0)), model.n, zs[-1], ys[:, -1])


def _exact_q(q) -> Fraction | None:
    """``q`` as a fraction if it is (to float precision) a small-denominator rational."""
    if isinstance(q, (Fraction, int)):
        return Fraction(q)
    f = Fraction(q).limit_denominator(10_000)
    return f if abs(float(f) - q) <= 1e-15 * max(1.0, abs(q)) else None


@lru_cache(maxsize=512)
def _h_exact(steps: int, q: Fraction) -> tuple[Fraction, ...]:
    x = steps / q
    out = []
    for t in range(steps + 1):
        at_x = Fraction(1)
        at_0 = Fraction(1)
        for s in range(steps + 1):
            if s != t:
                at_x *= (x - s) / (t - s)
                at_0 *= Fraction(-s, t - s)
        out.append(at_x - at_0)
    return tuple(out)


def _h_mp(steps: int, q: float) -> list[float]:
    with mpmath.workdps(50):
        x = mpmath.mpf(steps) / mpmath.mpf(q)
        out = []
        for t in range(steps + 1):
            at_x = mpmath.mpf(1)
            for s in range(steps + 1):
                if s != t:
                    at_x *= (x - s) / (t - s)
            out.append(float(at_x - (1 if t == 0 else 0)))
    return out


def h_coeffs(steps: int, q, exact: bool = False) -> list:
    """Interpolation weights mapping round totals to ``F(1) - F(0)``.

    Weight ``t`` is ``l_t(steps/q) - l_t(0)`` for the Lagrange basis on the
    nodes ``0, 1, ..., steps``. Grid values of ``q`` are handled in exact
    rational arithmetic; others in 50-digit floating point.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    qf = _exact_q(q)
    if not 0 < (qf if qf is not None else q) <= 1:
        raise ValueError(f"q={q} outside (0, 1]")
    if qf is not None:
        h = _h_exact(int(steps), qf)
        return list(h) if exact else [float(x) for x in h]
    if exact:
        raise ValueError("exact weights need a rational q")
    return _h_mp(int(steps), float(q))


def _scale(p, q, n):
    if isinstance(p, Fraction) or isinstance(q, Fraction):
        return as_fraction(q) / (n * as_fraction(p))
    return q / (n * p)


def pi_two_stage(obs: RolloutObservations, p, q, h: Sequence | None = None):
    """Two-stage interpolation estimate ``q/(np) * sum_t h_t * sums[t]``.

    Exact when ``p``, ``q`` and the sums are fractions.
    """
    steps = obs.steps
    if steps < 1:
        raise ValueError("need at least two rounds of observations")
    exact = isinstance(p, Fraction) and all(isinstance(s, (Fraction, int)) for s in obs.sums)
    if h is None:
        h = h_coeffs(steps, q, exact=exact)
    if len(h) != steps + 1:
        raise ValueError("weights and observations disagree on the number of rounds")
    total = sum(ht * st for ht, st in zip(h, obs.sums))
    return _scale(p, q, obs.n) * total


def pi_one_stage(obs: RolloutObservations, p):
    """One-stage interpolation estimate written with budget-scaled basis polynomials.

    ``(1/n) sum_t (l_t(1) - l_t(0)) sums[t]`` with ``l_t(x) = prod_s (beta x - p s)/(p t - p s)``.
    """
    steps = obs.steps
    if steps < 1:
        raise ValueError("need at least two rounds of observations")
    exact = isinstance(p, Fraction) and all(isinstance(s, (Fraction, int)) for s in obs.sums)
    pp = as_fraction(p) if exact else p
    total = 0
    for t in range(steps + 1):
        l1 = 1
        l0 = 1
        for s in range(steps + 1):
            if s == t:
                continue
            l1 = l1 * (steps - pp * s) / (pp * t - pp * s)
            l0 = l0 * (-pp * s) / (pp * t - pp * s)
        total += (l1 - l0) * obs.sums[t]
    return total / obs.n


def _means_diff(y, treated_mask, control_mask):
    nt, nc = int(treated_mask.sum()), int(control_mask.sum())
    if nt == 0 or nc == 0:
        raise UndefinedEstimate("empty treated or control group")
    return float(y[treated_mask].mean() - y[control_mask].mean())


def dm(per_node_final, final_z) -> float:
    y = np.asarray(per_node_final, dtype=np.float64)
    z = np.asarray(final_z).astype(bool)
    return _means_diff(y, z, ~z)


def dm_threshold(graph: InterferenceGraph, per_node_final, final_z, gamma: float) -> float:
    """DM over units whose neighborhoods mostly share their assignment.

    Treated units need at least ``gamma * d_i`` treated in-neighbors; control
    units at most ``(1 - gamma) * d_i``.
    """
    if not 0 <= gamma <= 1:
        raise ValueError("gamma must be in [0, 1]")
    y = np.asarray(per_node_final, dtype=np.float64)
    z = np.asarray(final_z).astype(np.float64)
    treated_nbrs = graph.adjacency @ z
    deg = graph.degrees
    zt = z.astype(bool)
    keep_t = zt & (treated_nbrs >= gamma * deg)
    keep_c = ~zt & (treated_nbrs <= (1 - gamma) * deg)
    return _means_diff(y, keep_t, keep_c)


def exposure_probs(graph: InterferenceGraph, p, n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities that each neighborhood is fully treated / fully untreated under ``CRD(pn, n)``."""
    from .theory import bracket

    n = graph.n if n is None else n
    pf = as_fraction(p)
    k = pf * n
    if k.denominator != 1:
        raise ValueError(f"p*n={k} is not a whole number")
    k = int(k)
    deg = graph.degrees
    cache_t: dict[int, float] = {}
    cache_c: dict[int, float] = {}
    pt = np.empty(graph.n)
    pc = np.empty(graph.n)
    for i, d in enumerate(deg.tolist()):
        if d not in cache_t:
            cache_t[d] = float(bracket(k, n, d))
            cache_c[d] = float(bracket(n - k, n, d))
        pt[i], pc[i] = cache_t[d], cache_c[d]
    return pt, pc


def _exposures(graph, final_z):
    z = np.asarray(final_z).astype(np.float64)
    treated_nbrs = graph.adjacency @ z
    deg = graph.degrees
    return treated_nbrs == deg, treated_nbrs == 0


def ht(graph: InterferenceGraph, per_node_final, final_z, p) -> float:
    y = np.asarray(per_node_final, dtype=np.float64)
    pt, pc = exposure_probs(graph, p)
    if np.any(pt <= 0) or np.any(pc <= 0):
        raise ValueError("some neighborhood can never be fully treated or fully untreated at this budget")
    full_t, full_c = _exposures(graph, final_z)
    return float(np.sum(y * full_t / pt) / graph.n - np.sum(y * full_c / pc) / graph.n)


def hajek(graph: InterferenceGraph, per_node_final, final_z, p) -> float:
    y = np.asarray(per_node_final, dtype=np.float64)
    pt, pc = exposure_probs(graph, p)
    if np.any(pt <= 0) or np.any(pc <= 0):
        raise ValueError("some neighborhood can never be fully treated or fully untreated at this budget")
    full_t, full_c = _exposures(graph, final_z)
    wt = full_t / pt
    wc = full_c / pc
    if wt.sum() == 0 or wc.sum() == 0:
        raise UndefinedEstimate("no fully treated or no fully untreated neighborhood")
    return float(np.sum(wt * y) / wt.sum() - np.sum(wc * y) / wc.sum())
