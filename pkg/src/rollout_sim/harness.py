"""Monte Carlo replication engine, parameter sweeps and the cross-check suite."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import theory
from .clustering import (
    Clustering,
    cut_edges,
    feature_clustering,
    greedy_min_cut,
    grid_clustering,
    load_clustering,
    load_features,
    random_balanced,
    single_cluster,
)
from .design import (
    DesignError,
    DesignKind,
    DesignSpec,
    as_fraction,
    check_realization,
    replication_rng,
    sample,
    sample_eligible,
    sample_rollout,
)
from .estimators import (
    RolloutObservations,
    UndefinedEstimate,
    dm,
    dm_threshold,
    h_coeffs,
    hajek,
    ht,
    pi_one_stage,
    pi_two_stage,
)
from .netgraph import InterferenceGraph, lattice, read_edge_list
from .outcomes import CoefficientModel, OutcomesModel, SymmetricSynthModel, random_coefficient_model

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "design,estimator,clustering,p,q,beta,R,tte_true,est_mean,bias_emp,var_emp,mse_emp,"
    "bias_theory,var_bound,var_exact_beta1,var_sampling,var_extrapolation,dropped,seed"
).split(",")

PI = "PI"
BASELINES = ("DM", "HT", "Hajek")
DEFAULT_DM_GAMMA = 0.75
NO_CLUSTERING = "none"

# random-stream tags for replication_rng
_STREAM_ROLLOUT = 0
_STREAM_BASELINE = 1
_STREAM_OUTER = 2
_STREAM_INNER = 3

_CHUNK = 64


def thread_count(requested: int | None = None) -> int:
    env = os.environ.get("ROLLOUT_SIM_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    n = cap if requested is None else min(int(requested), cap)
    return max(1, n)


# -- configuration ----------------------------------------------------------


@dataclass
class ExperimentConfig:
    network: dict
    model: dict
    designs: list[str] = field(default_factory=lambda: [DesignKind.CLUSTERED_CRD.value])
    clusterings: list[dict] = field(default_factory=list)
    p_grid: list = field(default_factory=lambda: [0.15])
    q_grid: list = field(default_factory=lambda: [1.0])
    steps: int | None = None
    R: int = 1000
    n_outer: int = 200
    n_inner: int = 50
    decompose: bool = True
    seed: int = 0
    estimators: list[str] = field(default_factory=lambda: [PI])
    out: str | None = None
    threads: int | None = None

    def __post_init__(self):
        if self.R < 1:
            raise ValueError("R must be >= 1")
        for d in self.designs:
            DesignKind(d)
        for e in self.estimators:
            parse_estimator(e)

    @classmethod
    def from_json(cls, data: Mapping | str, base_dir: str | Path | None = None) -> "ExperimentConfig":
        if isinstance(data, str):
            data = json.loads(data)
        data = dict(data)
        if base_dir is not None:
            data["_base"] = str(base_dir)
        base = data.pop("_base", None)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg._base = base
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_json(path.read_text(encoding="utf-8"), base_dir=path.parent)

    def resolve(self, rel: str) -> Path:
        base = getattr(self, "_base", None)
        p = Path(rel)
        return p if p.is_absolute() or base is None else Path(base) / p


def parse_estimator(name: str) -> tuple[str, float | None]:
    """``"DM(0.75)"`` -> ``("DM", 0.75)``; plain names get ``None``."""
    if name == PI or name in BASELINES:
        return name, None
    if name.startswith("DM(") and name.endswith(")"):
        g = float(name[3:-1])
        if not 0 <= g <= 1:
            raise ValueError(f"threshold in {name} outside [0, 1]")
        return "DM", g
    raise ValueError(f"unknown estimator {name!r}")


@dataclass
class Setup:
    graph: InterferenceGraph
    model: OutcomesModel
    clusterings: dict[str, Clustering]
    steps: int


def build_graph(config: ExperimentConfig) -> InterferenceGraph:
    net = config.network
    if "lattice" in net:
        return lattice(int(net["lattice"]))
    if "edge_list" in net:
        g = read_edge_list(config.resolve(net["edge_list"]), directed=net.get("directed", True),
                           compact=net.get("compact", False))
        return g[0] if isinstance(g, tuple) else g
    raise ValueError("network needs 'lattice' or 'edge_list'")


def build_model(config: ExperimentConfig, graph: InterferenceGraph) -> OutcomesModel:
    spec = dict(config.model)
    kind = spec.pop("type", "symmetric")
    if kind == "symmetric":
        return SymmetricSynthModel.from_json(spec, graph)
    if kind == "coefficients":
        data = json.loads(config.resolve(spec["path"]).read_text(encoding="utf-8"))
        return CoefficientModel.from_json(data, graph)
    raise ValueError(f"unknown model type {kind!r}")


def build_clustering(spec: Mapping, graph: InterferenceGraph, config: ExperimentConfig) -> Clustering:
    method = spec["method"]
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(9,)))
    if method == "grid":
        side = int(round(math.sqrt(graph.n)))
        if side * side != graph.n:
            raise ValueError("grid clustering needs a square lattice")
        cl = grid_clustering(side, int(spec["block"]))
    elif method == "random":
        cl = random_balanced(graph.n, int(spec["nc"]), rng)
    elif method == "greedy":
        cl = greedy_min_cut(graph, int(spec["nc"]), rng)
    elif method == "feature":
        with open(config.resolve(spec["path"]), encoding="utf-8") as fh:
            feats = load_features(fh, graph.n)
        cl = feature_clustering(feats, int(spec["nc"]), rng)
    elif method == "file":
        with open(config.resolve(spec["path"]), encoding="utf-8") as fh:
            cl = load_clustering(fh, graph.n)
    elif method == "single":
        cl = single_cluster(graph.n)
    else:
        raise ValueError(f"unknown clustering method {method!r}")
    name = spec.get("name") or cl.name or method
    return Clustering(cl.assign, name=name)


def prepare(config: ExperimentConfig) -> Setup:
    graph = build_graph(config)
    model = build_model(config, graph)
    clusterings = {}
    for spec in config.clusterings:
        cl = build_clustering(spec, graph, config)
        clusterings[cl.name] = cl
    return Setup(graph, model, clusterings, config.steps or model.beta)


# -- grid snapping ------------------------------------------------------------


def feasible_qs(kind: DesignKind, p: Fraction, n: int, clustering: Clustering | None = None) -> list[Fraction]:
    """Every ``q`` in ``[p, 1]`` with whole eligible and cluster counts."""
    if kind is DesignKind.ONE_STAGE_CRD:
        return [p]
    if kind is DesignKind.UNIT_BERNOULLI:
        raise ValueError("Bernoulli designs have no integrality constraint on q")
    if kind is DesignKind.CLUSTERED_CRD:
        base, top = clustering.n_c * p, clustering.n_c
    else:
        base, top = p * n, n
    out = []
    if base.denominator != 1:
        return out
    for k in range(int(base), top + 1):
        q = base / k
        if p <= q <= 1:
            out.append(q)
    return sorted(out)


def snap_q(q, kind: DesignKind, p: Fraction, n: int, clustering: Clustering | None = None) -> Fraction:
    """Nearest feasible ``q``; ties go to the smaller value."""
    q = as_fraction(q)
    if kind is DesignKind.UNIT_BERNOULLI:
        return min(max(q, p), Fraction(1))
    cands = feasible_qs(kind, p, n, clustering)
    if not cands:
        raise DesignError(f"no feasible q for p={p}")
    return min(cands, key=lambda c: (abs(c - q), c))


# -- records ------------------------------------------------------------------


@dataclass
class SweepRecord:
    design: str
    estimator: str
    clustering: str
    p: float
    q: float
    beta: int
    R: int
    tte_true: float
    est_mean: float
    bias_emp: float
    var_emp: float
    mse_emp: float
    bias_theory: float | None = None
    var_bound: float | None = None
    var_exact_beta1: float | None = None
    var_sampling: float | None = None
    var_extrapolation: float | None = None
    dropped: int = 0
    seed: int = 0
    q_requested: float | None = None
    estimates: np.ndarray | None = field(default=None, repr=False)

    def row(self) -> list[str]:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, (float, np.floating)):
                return repr(float(v))
            return str(v)

        return [fmt(getattr(self, c)) for c in CSV_COLUMNS]


def _summary(estimates: Sequence[float]) -> tuple[float, float]:
    """Mean and population-style variance, order-stable via ``math.fsum``."""
    r = len(estimates)
    if r == 0:
        return math.nan, math.nan
    mean = math.fsum(estimates) / r
    var = math.fsum((x - mean) ** 2 for x in estimates) / r
    return mean, var


def _make_record(design, estimator, cl_name, spec: DesignSpec, beta, tte_true, estimates, dropped, seed, **theory_vals):
    """Summary row; ``R`` counts every replication run, ``dropped`` the undefined ones excluded."""
    mean, var = _summary(estimates)
    bias = mean - tte_true
    return SweepRecord(
        design=design, estimator=estimator, clustering=cl_name, p=float(spec.p), q=float(spec.q),
        beta=beta, R=len(estimates) + dropped, tte_true=float(tte_true), est_mean=mean, bias_emp=bias,
        var_emp=var, mse_emp=bias * bias + var, dropped=dropped, seed=seed,
        estimates=np.asarray(estimates, dtype=np.float64), **theory_vals,
    )


# -- replication engine -------------------------------------------------------


def _pi_chunk(model: OutcomesModel, spec: DesignSpec, h: np.ndarray, seed: int, reps: range) -> np.ndarray:
    n = model.n
    zs = [sample(spec, n, replication_rng(seed, r, _STREAM_ROLLOUT)).z_all() for r in reps]
    stacked = np.concatenate(zs, axis=0)  # (len(reps) * (steps+1), n)
    sums = model.evaluate(stacked.T).sum(axis=0).reshape(len(reps), spec.steps + 1)
    return float(spec.q) / (n * float(spec.p)) * (sums @ h)


def _parallel_map(fn, chunks, threads):
    if threads <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))


def _chunks(R: int) -> list[range]:
    return [range(s, min(s + _CHUNK, R)) for s in range(0, R, _CHUNK)]


def run_pi(model: OutcomesModel, spec: DesignSpec, R: int, seed: int, threads: int = 1) -> np.ndarray:
    """``R`` two-stage interpolation estimates; replication ``r`` always sees the same draws."""
    h = np.array(h_coeffs(spec.steps, spec.q), dtype=np.float64)
    parts = _parallel_map(lambda c: _pi_chunk(model, spec, h, seed, c), _chunks(R), threads)
    return np.concatenate(parts) if parts else np.empty(0)


def _baseline_chunk(model, graph, p, names, seed, reps):
    spec = DesignSpec(DesignKind.ONE_STAGE_CRD, p, p, 1)
    n = model.n
    zs = np.stack([sample(spec, n, replication_rng(seed, r, _STREAM_BASELINE)).z(1) for r in reps])
    ys = model.evaluate(zs.T)
    out = {name: [] for name in names}
    for k in range(len(reps)):
        y, z = ys[:, k], zs[k]
        for name in names:
            base, g = parse_estimator(name)
            try:
                if base == "DM":
                    v = dm(y, z) if g is None else dm_threshold(graph, y, z, g)
                elif base == "HT":
                    v = ht(graph, y, z, p)
                else:
                    v = hajek(graph, y, z, p)
            except UndefinedEstimate:
                v = None
            out[name].append(v)
    return out


def run_baselines(model, graph, p, names, R, seed, threads=1) -> dict[str, list]:
    """Baseline estimates on a one-stage ``CRD(pn, n)`` final assignment; ``None`` marks a dropped replication."""
    parts = _parallel_map(lambda c: _baseline_chunk(model, graph, p, names, seed, c), _chunks(R), threads)
    return {name: [v for part in parts for v in part[name]] for name in names}


def decompose_variance(
    model: OutcomesModel, spec: DesignSpec, n_outer: int = 200, n_inner: int = 50, seed: int = 0, threads: int = 1
) -> tuple[float, float]:
    """Nested Monte Carlo split of the estimator variance into ``(extrapolation, sampling)``.

    Extrapolation is the mean within-``U`` unbiased sample variance; sampling
    is the between-``U`` variance of within-``U`` means less the ANOVA
    correction ``extrapolation / n_inner``, floored at zero.
    """
    if n_outer < 2 or n_inner < 2:
        raise ValueError("nested decomposition needs n_outer >= 2 and n_inner >= 2")
    n = model.n
    h = np.array(h_coeffs(spec.steps, spec.q), dtype=np.float64)
    scale = float(spec.q) / (n * float(spec.p))

    def outer(o: int):
        u = sample_eligible(spec, n, replication_rng(seed, o, _STREAM_OUTER))
        zs = np.concatenate(
            [sample_rollout(spec, n, u, replication_rng(seed, o, _STREAM_INNER, i)).z_all() for i in range(n_inner)]
        )
        sums = model.evaluate(zs.T).sum(axis=0).reshape(n_inner, spec.steps + 1)
        est = scale * (sums @ h)
        m = math.fsum(est) / n_inner
        return m, math.fsum((x - m) ** 2 for x in est) / (n_inner - 1)

    res = _parallel_map(outer, list(range(n_outer)), threads)
    means = [m for m, _ in res]
    within = math.fsum(v for _, v in res) / n_outer
    grand = math.fsum(means) / n_outer
    between = math.fsum((m - grand) ** 2 for m in means) / (n_outer - 1)
    return within, max(0.0, between - within / n_inner)


def _theory_values(model: OutcomesModel, spec: DesignSpec, cl: Clustering | None) -> dict:
    out = {}

    def attempt(key, fn):
        try:
            out[key] = float(fn())
        except (theory.AssumptionError, ZeroDivisionError, ValueError) as e:
            log.debug("%s unavailable: %s", key, e)

    attempt("bias_theory", lambda: theory.bias_closed(model, spec, cl).closed_form)
    if spec.kind.is_crd:
        attempt("var_bound", lambda: theory.var_bound_thm3(model, spec, cl).bound_thm3)
        if model.beta == 1 and spec.steps == 1:
            attempt("var_exact_beta1", lambda: theory.var_exact_beta1(model, spec, cl))
    return out


def run_point(
    setup: Setup,
    kind: DesignKind | str,
    p,
    q,
    clustering: str = NO_CLUSTERING,
    R: int = 1000,
    seed: int = 0,
    decompose: tuple[int, int] | None = None,
    threads: int = 1,
) -> SweepRecord:
    """Replicate the two-stage interpolation estimator at one design point."""
    kind = DesignKind(kind)
    cl = setup.clusterings.get(clustering) if clustering != NO_CLUSTERING else None
    spec = DesignSpec(kind, p, q, setup.steps, cl if kind is DesignKind.CLUSTERED_CRD else None)
    spec.validate(setup.graph.n)
    model = setup.model
    est = run_pi(model, spec, R, seed, threads)
    vals = _theory_values(model, spec, cl)
    if decompose is not None and kind.is_crd:
        ext, smp = decompose_variance(model, spec, decompose[0], decompose[1], seed, threads)
        vals.update(var_extrapolation=ext, var_sampling=smp)
    name = clustering if kind is DesignKind.CLUSTERED_CRD else NO_CLUSTERING
    return _make_record(kind.value, PI, name, spec, model.beta, float(model.tte()), est.tolist(), 0, seed, **vals)


# -- sweeps -------------------------------------------------------------------


@dataclass
class SweepResult:
    records: list[SweepRecord]
    warnings: list[str]


def sweep(config: ExperimentConfig, setup: Setup | None = None, out: str | Path | None = None) -> SweepResult:
    """Run every (design, clustering, p, q) point and write the CSV if an output path is set."""
    setup = setup or prepare(config)
    threads = thread_count(config.threads)
    n = setup.graph.n
    records: list[SweepRecord] = []
    warnings: list[str] = []
    pi_wanted = PI in config.estimators
    baselines = [e for e in config.estimators if e != PI]
    nested = (config.n_outer, config.n_inner) if config.decompose else None
    tte_true = float(setup.model.tte())

    for p_raw in config.p_grid:
        p = as_fraction(p_raw)
        if baselines:
            try:
                spec = DesignSpec(DesignKind.ONE_STAGE_CRD, p, p, 1)
                spec.validate(n)
                res = run_baselines(setup.model, setup.graph, p, baselines, config.R, config.seed, threads)
                for name in baselines:
                    vals = [v for v in res[name] if v is not None]
                    dropped = len(res[name]) - len(vals)
                    records.append(_make_record(DesignKind.ONE_STAGE_CRD.value, name, NO_CLUSTERING, spec, setup.model.beta,
                                                tte_true, vals, dropped, config.seed))
            except (DesignError, ValueError) as e:
                msg = f"baselines skipped at p={p}: {e}"
                log.warning(msg)
                warnings.append(msg)
        if not pi_wanted:
            continue
        for design in config.designs:
            kind = DesignKind(design)
            names = list(setup.clusterings) if kind is DesignKind.CLUSTERED_CRD else [NO_CLUSTERING]
            if kind is DesignKind.CLUSTERED_CRD and not names:
                warnings.append("clustered design requested without clusterings")
                continue
            for cname in names:
                cl = setup.clusterings.get(cname)
                q_values = [p] if kind is DesignKind.ONE_STAGE_CRD else config.q_grid
                seen = set()
                for q_raw in q_values:
                    try:
                        q = snap_q(q_raw, kind, p, n, cl)
                        if q != as_fraction(q_raw):
                            log.info("q=%s snapped to %s (%s, %s, p=%s)", q_raw, q, design, cname, p)
                        if q in seen:
                            continue
                        seen.add(q)
                        rec = run_point(setup, kind, p, q, cname, config.R, config.seed, nested, threads)
                        rec.q_requested = float(as_fraction(q_raw))
                        records.append(rec)
                    except DesignError as e:
                        msg = f"point skipped ({design}, {cname}, p={p}, q={q_raw}): {e}"
                        log.warning(msg)
                        warnings.append(msg)
    target = out if out is not None else config.out
    if target:
        write_csv(records, target)
    return SweepResult(records, warnings)


def csv_text(records: Sequence[SweepRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def write_csv(records: Sequence[SweepRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(csv_text(records))


# -- clustering metrics -----------------------------------------------------


def metrics_table(graph: InterferenceGraph, model: OutcomesModel, clusterings: Sequence[Clustering]) -> list[dict]:
    rows = []
    for cl in clusterings:
        rows.append(
            {
                "clustering": cl.name,
                "n_c": cl.n_c,
                "var_lbar": float(model.cluster_influence_variance(cl)),
                "cut_effect": float(model.cut_effect(cl)),
                "cut_edges": cut_edges(graph, cl),
            }
        )
    return rows


# -- verification suite ---------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class VerifyReport:
    checks: list[CheckResult]

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def failed(self) -> list[str]:
        return [c.name for c in self.checks if not c.ok]

    def lines(self) -> list[str]:
        return [f"{'PASS' if c.ok else 'FAIL'} {c.name}" + (f": {c.detail}" if c.detail else "") for c in self.checks]


def random_digraph(n: int, rng: np.random.Generator, density: float = 0.4) -> InterferenceGraph:
    return InterferenceGraph.from_in_nbrs(
        [[j for j in range(n) if j != i and rng.random() < density] for i in range(n)]
    )


# (n, p, beta, design, q, cluster size); every entry keeps all counts whole
_TINY_TEMPLATES = [
    (4, "1/2", 1, DesignKind.UNIT_CRD, "2/3", None),
    (4, "1/2", 1, DesignKind.CLUSTERED_CRD, "1/2", 2),
    (4, "1/2", 2, DesignKind.UNIT_CRD, "1", None),
    (4, "1/2", 2, DesignKind.CLUSTERED_CRD, "1", 2),
    (4, "1/2", 2, DesignKind.UNIT_CRD, "2/3", None),
    (6, "1/2", 1, DesignKind.CLUSTERED_CRD, "3/4", 2),
    (6, "1/2", 1, DesignKind.UNIT_CRD, "3/5", None),
    (6, "1/2", 3, DesignKind.UNIT_CRD, "3/4", None),
    (6, "1/2", 3, DesignKind.CLUSTERED_CRD, "3/4", 2),
    (6, "1/2", 3, DesignKind.CLUSTERED_CRD, "1", 3),
    (6, "1/2", 3, DesignKind.UNIT_CRD, "1", None),
    (6, "1/3", 2, DesignKind.UNIT_CRD, "1/2", None),
    (6, "1/3", 2, DesignKind.UNIT_CRD, "2/5", None),
    (6, "1/3", 1, DesignKind.CLUSTERED_CRD, "1", 2),
    (8, "1/4", 2, DesignKind.CLUSTERED_CRD, "1/2", 2),
    (8, "1/4", 1, DesignKind.CLUSTERED_CRD, "1/2", 4),
    (8, "1/4", 2, DesignKind.UNIT_CRD, "1/3", None),
    (8, "1/4", 1, DesignKind.UNIT_CRD, "2/5", None),
]

_FULL_TEMPLATES = [
    (8, "1/2", 2, DesignKind.UNIT_CRD, "2/3", None),
    (8, "1/2", 1, DesignKind.CLUSTERED_CRD, "1", 2),
    (8, "1/2", 2, DesignKind.CLUSTERED_CRD, "2/3", None),
    (8, "3/8", 3, DesignKind.UNIT_CRD, "1/2", None),
]


def _contiguous_clustering(n: int, size: int) -> Clustering:
    return Clustering(np.arange(n) // size, name=f"blocks{size}")


def tiny_instances(rng: np.random.Generator, full: bool = False, nonneg: bool = False, q_equals_p: bool = False):
    """``(model, spec)`` pairs small enough for exhaustive enumeration."""
    templates = _TINY_TEMPLATES + (_FULL_TEMPLATES if full else [])
    out = []
    for n, p, beta, kind, q, csize in templates:
        p = Fraction(p)
        q = p if q_equals_p else Fraction(q)
        if csize is None and kind is DesignKind.CLUSTERED_CRD:
            csize = 2 if n % 2 == 0 else 1
        graph = random_digraph(n, rng)
        model = random_coefficient_model(graph, beta, rng, nonneg=nonneg or bool(rng.integers(2)))
        cl = _contiguous_clustering(n, csize) if kind is DesignKind.CLUSTERED_CRD else None
        try:
            spec = DesignSpec(kind, p, q, beta, cl)
            spec.validate(n)
        except DesignError:
            continue
        out.append((model, spec))
    return out


def _check(results: list, name: str, fn: Callable[[], str | None]) -> None:
    try:
        detail = fn()
        results.append(CheckResult(name, True, detail or ""))
    except AssertionError as e:
        results.append(CheckResult(name, False, str(e)))
    except Exception as e:  # a crash in a check is a failure of that check
        results.append(CheckResult(name, False, f"{type(e).__name__}: {e}"))


def verify(full: bool = False, seed: int = 0, h_fn: Callable | None = None) -> VerifyReport:
    """Run the oracle and identity checks; ``h_fn`` overrides the estimator weights (mutation testing)."""
    h_fn = h_fn or (lambda steps, q: h_coeffs(steps, q, exact=True))
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []
    max_beta = 8 if full else 5
    q_grid = [Fraction(k, 20) for k in range(1, 21)]

    def lagrange_exactness():
        for beta in range(1, max_beta + 1):
            for q in q_grid:
                h = h_fn(beta, q)
                assert sum(h) == 0, f"weights do not sum to zero (beta={beta}, q={q})"
                for _ in range(3):
                    coef = [Fraction(int(c)) for c in rng.integers(-9, 10, beta + 1)]
                    poly = lambda x: sum(c * x**k for k, c in enumerate(coef))
                    got = sum(ht_ * poly(t) for t, ht_ in enumerate(h))
                    want = poly(Fraction(beta) / q) - poly(0)
                    assert got == want, f"beta={beta}, q={q}: {got} != {want}"

    def h_bound():
        for beta in range(1, max_beta + 1):
            for q in q_grid:
                bound = (Fraction(beta) / q) ** beta
                assert all(abs(x) <= bound for x in h_fn(beta, q)), f"beta={beta}, q={q}"

    def design_laws():
        g = lattice(4)
        cl = grid_clustering(4, 2)
        specs = [
            DesignSpec(DesignKind.ONE_STAGE_CRD, Fraction(1, 2), None, 2),
            DesignSpec(DesignKind.UNIT_CRD, Fraction(1, 4), Fraction(1, 2), 2),
            DesignSpec(DesignKind.CLUSTERED_CRD, Fraction(1, 4), Fraction(1, 2), 2, cl),
            DesignSpec(DesignKind.UNIT_BERNOULLI, Fraction(1, 4), Fraction(1, 2), 2),
        ]
        for spec in specs:
            for r in range(200):
                bad = check_realization(spec, g.n, sample(spec, g.n, replication_rng(seed, r)))
                assert not bad, f"{spec.kind.value}: {bad}"

    def bracket_count():
        for m in range(13):
            for k in range(m + 1):
                for r in range(m + 1):
                    assert theory.bracket(k, m, r) == Fraction(math.comb(k, r), math.comb(m, r)), (k, m, r)

    instances = tiny_instances(rng, full)

    def bias_oracle():
        for model, spec in instances:
            got = theory.oracle_expectation(model, spec) - theory.exact_tte(model)
            want = theory.bias_closed(model, spec).closed_form
            assert got == want, f"{spec.kind.value} p={spec.p} q={spec.q}: {got} != {want}"
        return f"{len(instances)} instances"

    def unbiasedness():
        inst = tiny_instances(rng, full, q_equals_p=True)
        for model, spec in inst:
            assert theory.oracle_expectation(model, spec) == theory.exact_tte(model), spec
        return f"{len(inst)} instances"

    def beta1_variance_oracle():
        count = 0
        for model, spec in instances:
            if model.beta != 1:
                continue
            assert theory.oracle_variance(model, spec) == theory.var_exact_beta1(model, spec), spec
            count += 1
        assert count, "no linear instances"
        return f"{count} instances"

    def variance_bound_dominance():
        inst = tiny_instances(rng, full, nonneg=True)
        for model, spec in inst:
            v = theory.oracle_variance(model, spec)
            b = theory.var_bound_thm3(model, spec).bound_thm3
            assert float(v) <= b * (1 + 1e-12) + 1e-12, f"{spec}: {float(v)} > {b}"
        return f"{len(inst)} instances"

    def estimator_identities():
        for beta in range(1, max_beta + 1):
            for _ in range(5):
                n = 4 * beta
                sums = [Fraction(int(x), 7) for x in rng.integers(-50, 50, beta + 1)]
                p = Fraction(1, 4)
                obs = RolloutObservations(sums, n)
                got = pi_two_stage(obs, p, Fraction(1), h=h_fn(beta, Fraction(1)))
                assert got == (sums[-1] - sums[0]) / (n * p), f"q=1 identity, beta={beta}"
        for _ in range(20):
            sums = [Fraction(int(x), 3) for x in rng.integers(-50, 50, 2)]
            p = Fraction(int(rng.integers(1, 8)), 8)
            obs = RolloutObservations(sums, 8)
            assert pi_two_stage(obs, p, p, h=h_fn(1, p)) == pi_one_stage(obs, p), "beta=1 one-stage form"

    _check(results, "lagrange_exactness", lagrange_exactness)
    _check(results, "h_bound", h_bound)
    _check(results, "design_laws", design_laws)
    _check(results, "bracket_count", bracket_count)
    _check(results, "bias_oracle", bias_oracle)
    _check(results, "unbiasedness", unbiasedness)
    _check(results, "beta1_variance_oracle", beta1_variance_oracle)
    _check(results, "variance_bound_dominance", variance_bound_dominance)
    _check(results, "estimator_identities", estimator_identities)
    return VerifyReport(results)
