"""Randomized staggered-rollout designs.

A design picks an eligible set ``U`` and then treats a growing, nested set of
eligible units over ``steps`` rounds. Budgets are held as exact fractions so
that integrality of every treatment count can be checked rather than rounded.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np

from .clustering import Clustering

NEVER = -1


class DesignKind(str, enum.Enum):
    ONE_STAGE_CRD = "OneStageCRD"
    UNIT_CRD = "TwoStageUnitCRD"
    CLUSTERED_CRD = "TwoStageClusteredCRD"
    UNIT_BERNOULLI = "TwoStageUnitBernoulli"

    @property
    def is_crd(self) -> bool:
        return self is not DesignKind.UNIT_BERNOULLI


class DesignError(ValueError):
    """Infeasible or inconsistent design parameters."""


def as_fraction(x, max_denominator: int = 1_000_000) -> Fraction:
    """Exact value for ``x``; floats are read as the nearest small-denominator rational."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, str):
        return Fraction(x)
    return Fraction(x).limit_denominator(max_denominator)


def _whole(x: Fraction, what: str) -> int:
    if x.denominator != 1:
        raise DesignError(f"{what} = {x} is not a whole number")
    return int(x)


@dataclass(frozen=True)
class DesignSpec:
    kind: DesignKind
    p: Fraction
    q: Fraction
    steps: int
    clustering: Clustering | None = field(default=None, compare=False)

    def __init__(self, kind, p, q=None, steps: int = 1, clustering: Clustering | None = None):
        kind = DesignKind(kind)
        p = as_fraction(p)
        q = p if q is None else as_fraction(q)
        if kind is DesignKind.ONE_STAGE_CRD:
            q = p
        if not (0 < p <= 1):
            raise DesignError(f"budget p={p} outside (0, 1]")
        if not (p <= q <= 1):
            raise DesignError(f"effective budget q={q} outside [p, 1]")
        if steps < 1:
            raise DesignError("steps must be >= 1")
        if kind is DesignKind.CLUSTERED_CRD:
            if clustering is None:
                raise DesignError("clustered design needs a clustering")
            if not clustering.equal_size:
                raise DesignError("clustered design needs equal-size clusters")
            _whole(clustering.n_c * p / q, "clusters selected n_c*p/q")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "steps", int(steps))
        object.__setattr__(self, "clustering", clustering)
        if clustering is not None:
            self.validate(clustering.n)

    def validate(self, n: int) -> "DesignSizes":
        """Check every treatment count is whole for a population of ``n``."""
        if self.clustering is not None and self.clustering.n != n:
            raise DesignError("clustering size does not match population")
        if self.kind is DesignKind.UNIT_BERNOULLI:
            # round sizes follow the realized |U|, so nothing needs to be whole here
            return DesignSizes(n, None, None, None, None)
        treated = _whole(self.p * n, "treated count p*n")
        per_step = [_whole(Fraction(t) * self.p * n / self.steps, f"step {t} count") for t in range(self.steps + 1)]
        u_size = _whole(self.p * n / self.q, "eligible count p*n/q")
        n_sel = None
        if self.kind is DesignKind.CLUSTERED_CRD:
            n_sel = _whole(self.clustering.n_c * self.p / self.q, "clusters selected")
        return DesignSizes(n, treated, u_size, per_step, n_sel)

    def to_json(self, clustering_file: str | None = None) -> dict:
        d = {"kind": self.kind.value, "p": str(self.p), "q": str(self.q), "steps": self.steps}
        if clustering_file:
            d["clustering_file"] = clustering_file
        return d

    @classmethod
    def from_json(cls, data: Mapping, clustering: Clustering | None = None) -> "DesignSpec":
        return cls(data["kind"], data["p"], data.get("q"), data.get("steps", 1), clustering)


@dataclass(frozen=True)
class DesignSizes:
    n: int
    treated: int | None
    u_size: int | None
    per_step: list[int] | None
    clusters_selected: int | None


@dataclass(frozen=True)
class RolloutRealization:
    """One sampled rollout: eligible set and the first round each unit is treated."""

    selected: np.ndarray
    treat_time: np.ndarray
    steps: int

    def z(self, t: int) -> np.ndarray:
        return ((self.treat_time >= 1) & (self.treat_time <= t)).astype(np.int8)

    def z_all(self) -> np.ndarray:
        """``(steps + 1, n)`` stack of treatment vectors."""
        return np.stack([self.z(t) for t in range(self.steps + 1)])


def _realization(n: int, selected_idx: np.ndarray, order: np.ndarray, counts: list[int], steps: int):
    selected = np.zeros(n, dtype=bool)
    selected[selected_idx] = True
    treat_time = np.full(n, NEVER, dtype=np.int64)
    prev = 0
    for t in range(1, steps + 1):
        treat_time[order[prev : counts[t]]] = t
        prev = counts[t]
    return RolloutRealization(selected, treat_time, steps)


def sample_eligible(spec: DesignSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Stage 1: sorted indices of the eligible set ``U``."""
    sizes = spec.validate(n)
    kind = spec.kind
    if kind is DesignKind.ONE_STAGE_CRD:
        return np.arange(n)
    if kind is DesignKind.UNIT_CRD:
        return np.sort(rng.choice(n, sizes.u_size, replace=False))
    if kind is DesignKind.CLUSTERED_CRD:
        cl = spec.clustering
        chosen = rng.choice(cl.n_c, sizes.clusters_selected, replace=False)
        return np.sort(np.concatenate([cl.members[c] for c in chosen]))
    return np.flatnonzero(rng.random(n) < float(spec.p / spec.q))


def sample_rollout(spec: DesignSpec, n: int, eligible: np.ndarray, rng: np.random.Generator) -> RolloutRealization:
    """Stage 2: a uniformly random staggered rollout over ``eligible``."""
    sizes = spec.validate(n)
    eligible = np.asarray(eligible, dtype=np.int64)
    order = eligible[rng.permutation(len(eligible))]
    if spec.kind.is_crd:
        counts = sizes.per_step
    else:
        # Bernoulli stage 1: round sizes follow the realized |U|
        counts = [math.floor(Fraction(t) * spec.q * len(eligible) / spec.steps) for t in range(spec.steps + 1)]
    return _realization(n, eligible, order, counts, spec.steps)


def sample(spec: DesignSpec, n: int, rng: np.random.Generator) -> RolloutRealization:
    """Draw one rollout realization."""
    return sample_rollout(spec, n, sample_eligible(spec, n, rng), rng)


def check_realization(spec: DesignSpec, n: int, real: RolloutRealization) -> list[str]:
    """Names of violated rollout laws (empty when the realization is valid)."""
    bad = []
    sizes = spec.validate(n)
    outside = ~real.selected
    if np.any(real.treat_time[outside] != NEVER):
        bad.append("treatment_restriction")
    zs = real.z_all()
    if spec.kind.is_crd:
        if int(real.selected.sum()) != (sizes.u_size if sizes.u_size is not None else n):
            bad.append("eligible_size")
        if [int(z.sum()) for z in zs] != sizes.per_step:
            bad.append("per_round_treatment")
    else:
        u = int(real.selected.sum())
        want = [math.floor(Fraction(t) * spec.q * u / spec.steps) for t in range(spec.steps + 1)]
        if [int(z.sum()) for z in zs] != want:
            bad.append("per_round_treatment")
    if np.any(np.diff(zs, axis=0) < 0):
        bad.append("monotonicity")
    if spec.kind is DesignKind.CLUSTERED_CRD:
        cl = spec.clustering
        sel = real.selected
        for m in cl.members:
            if sel[m].any() and not sel[m].all():
                bad.append("whole_clusters")
                break
    return bad


def marginal_treated(spec: DesignSpec, n: int, i: int, t: int) -> Fraction:
    """``Pr(z_i^t = 1)``; identical for every unit under these designs."""
    if not 0 <= i < n:
        raise IndexError(i)
    if not 0 <= t <= spec.steps:
        raise ValueError(f"round {t} outside 0..{spec.steps}")
    spec.validate(n)
    return (spec.p / spec.q) * (Fraction(t) * spec.q / spec.steps)


def prob_subset_in_U(spec: DesignSpec, n: int, size: int, n_clusters: int | None = None) -> Fraction:
    """``Pr(S within U)`` for a set of ``size`` units touching ``n_clusters`` clusters."""
    from .theory import bracket

    if size == 0:
        return Fraction(1)
    kind = spec.kind
    if kind is DesignKind.ONE_STAGE_CRD:
        return Fraction(1)
    if kind is DesignKind.UNIT_BERNOULLI:
        return (spec.p / spec.q) ** size
    sizes = spec.validate(n)
    if kind is DesignKind.UNIT_CRD:
        return bracket(sizes.u_size, n, size)
    if n_clusters is None:
        raise ValueError("clustered design needs the number of clusters touched")
    return bracket(sizes.clusters_selected, spec.clustering.n_c, n_clusters)


def prob_set_in_U(spec: DesignSpec, n: int, nodes) -> Fraction:
    nodes = list(set(nodes))
    r = None
    if spec.kind is DesignKind.CLUSTERED_CRD:
        r = len(set(spec.clustering.assign[nodes].tolist())) if nodes else 0
    return prob_subset_in_U(spec, n, len(nodes), r)


def replication_rng(seed: int, rep: int, stream: int = 0, *sub: int) -> np.random.Generator:
    """Independent generator for replication ``rep`` of ``stream``; stable under any scheduling.

    The same ``(seed, stream, rep)`` gives the same draws at every design
    point, so sweeps use common random numbers.
    """
    key = (int(stream), int(rep), *map(int, sub))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


def load_design(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
