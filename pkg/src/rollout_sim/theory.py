"""Closed-form bias and variance of the two-stage interpolation estimator, and
exhaustive oracles that certify them on tiny instances."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .clustering import Clustering, singletons, var_hat
from .design import DesignKind, DesignSpec, prob_subset_in_U
from .estimators import RolloutObservations, h_coeffs, pi_two_stage
from .outcomes import CoefficientModel, OutcomesModel, SymmetricSynthModel, materialize

ORACLE_MAX_N = 8
ORACLE_MAX_ORDERINGS = 40320


class AssumptionError(ValueError):
    """A theorem's hypotheses do not hold for the given inputs."""


def bracket(k: int, m: int, r: int) -> Fraction:
    """Probability that ``r`` fixed units all land in a uniformly random ``k``-subset of ``m``."""
    if not (isinstance(k, (int, np.integer)) and isinstance(m, (int, np.integer)) and isinstance(r, (int, np.integer))):
        raise TypeError("bracket needs integer arguments")
    if not (0 <= r <= m and 0 <= k <= m):
        raise ValueError(f"bracket({k}, {m}, {r}) needs 0 <= r <= m and 0 <= k <= m")
    out = Fraction(1)
    for i in range(r):
        if k - i <= 0:
            return Fraction(0)
        out *= Fraction(k - i, m - i)
    return out


def _check_rounds(model: OutcomesModel, spec: DesignSpec) -> None:
    if spec.steps < model.beta:
        raise AssumptionError(f"{spec.steps} rollout rounds cannot fit a degree-{model.beta} model")


def _design_clustering(spec: DesignSpec, n: int, clustering: Clustering | None) -> Clustering:
    if spec.kind is DesignKind.CLUSTERED_CRD:
        cl = clustering if clustering is not None else spec.clustering
        if cl is None:
            raise ValueError("clustered design needs a clustering")
        return cl
    if clustering is not None:
        return clustering
    return singletons(n)


@dataclass
class BiasReport:
    closed_form: object
    bound: object
    per_size_terms: dict = field(default_factory=dict)


def _bias_terms(model: OutcomesModel, spec: DesignSpec) -> dict[int, object]:
    n = model.n
    clustered = spec.kind is DesignKind.CLUSTERED_CRD
    profile = model.size_profile(spec.clustering if clustered else None)
    exact = not any(isinstance(v, (float, np.floating)) for v in profile.values())
    ratio = spec.q / spec.p
    terms: dict[int, object] = {}
    for (k, r), w in sorted(profile.items()):
        prob = prob_subset_in_U(spec, n, k, r if clustered else None)
        factor = ratio * prob - 1
        terms[k] = terms.get(k, 0) + w * (factor if exact else float(factor))
    return {k: v / n for k, v in terms.items()}


def bias_closed(model: OutcomesModel, spec: DesignSpec, clustering: Clustering | None = None) -> BiasReport:
    """Exact bias of the two-stage estimator: sum of ``c * ((q/p) Pr(S in U) - 1)`` over nonempty ``S``."""
    if spec.kind is DesignKind.CLUSTERED_CRD and clustering is None and spec.clustering is None:
        raise ValueError("clustered design needs a clustering")
    if spec.kind is DesignKind.CLUSTERED_CRD and clustering is not None and spec.clustering is not clustering:
        spec = DesignSpec(spec.kind, spec.p, spec.q, spec.steps, clustering)
    _check_rounds(model, spec)
    terms = _bias_terms(model, spec)
    total = sum(terms.values()) if terms else 0
    try:
        bound = bias_bound(model, spec, clustering)
    except AssumptionError:
        bound = None
    return BiasReport(total, bound, terms)


def bias_bound(model: OutcomesModel, spec: DesignSpec, clustering: Clustering | None = None):
    """Magnitude bound ``(q - p)/q * C(delta(Pi))`` for nonnegative coefficients."""
    if not model.nonnegative:
        raise AssumptionError("bias bound needs nonnegative coefficients")
    cl = _design_clustering(spec, model.n, clustering)
    cut = model.cut_effect(cl)
    factor = (spec.q - spec.p) / spec.q
    if isinstance(cut, (float, np.floating)):
        return float(factor) * float(cut)
    return factor * cut


def bias_bound_finite(model: OutcomesModel, spec: DesignSpec, clustering: Clustering | None = None):
    """Bias magnitude bound that holds at every population size for nonnegative coefficients.

    ``max_r (1 - (q/p) Pr(S in U | |Pi(S)| = r)) * C(delta(Pi))`` over
    ``2 <= r <= steps``. ``bias_bound`` uses the with-replacement factor
    ``(q - p)/q``, which a finite number of clusters can exceed.
    """
    if not model.nonnegative:
        raise AssumptionError("bias bound needs nonnegative coefficients")
    _check_rounds(model, spec)
    cl = _design_clustering(spec, model.n, clustering)
    n = model.n
    clustered = spec.kind is DesignKind.CLUSTERED_CRD
    worst = Fraction(0)
    cap = cl.n_c if clustered else n
    for r in range(2, min(model.beta, cap) + 1):
        prob = prob_subset_in_U(spec, n, r, r if clustered else None)
        worst = max(worst, 1 - spec.q / spec.p * prob)
    cut = model.cut_effect(cl)
    if isinstance(cut, (float, np.floating)):
        return float(worst) * float(cut)
    return worst * cut


@dataclass
class VarianceReport:
    bound_thm3: float | None = None
    exact_beta1: object = None
    components: tuple = ()


def var_bound_thm3(model: OutcomesModel, spec: DesignSpec, clustering: Clustering | None = None) -> VarianceReport:
    """Three-term variance bound for clustered (or unit) CRD rollouts with nonnegative coefficients.

    Terms: extrapolation (zero at ``q = 1``), across-cluster influence
    variance, and cut effect (zero at ``q = p``).
    """
    if spec.kind is DesignKind.UNIT_BERNOULLI:
        raise AssumptionError("variance bound covers CRD designs only")
    if not model.nonnegative:
        raise AssumptionError("variance bound needs nonnegative coefficients")
    _check_rounds(model, spec)
    cl = _design_clustering(spec, model.n, clustering)
    if not cl.equal_size:
        raise AssumptionError("variance bound needs equal-size clusters")
    n, beta = model.n, spec.steps
    p, q = float(spec.p), float(spec.q)
    ymax = float(model.y_max())
    d = model.graph.d
    n_c = cl.n_c
    extrap = 0.0
    if spec.q < 1:
        extrap = q**3 * beta**2 * ymax**2 / (p**2 * n) * (beta / q) ** (2 * beta) * (d**2 + 4 * beta**3)
    sampling = 0.0
    cut_term = 0.0
    if spec.q > spec.p:
        sampling = (q - p) / (p * (n_c - 1)) * float(model.cluster_influence_variance(cl))
        cut_term = 2 * d**2 * ymax / n_c * float(model.cut_effect(cl))
    return VarianceReport(extrap + sampling + cut_term, None, (extrap, sampling, cut_term))


def var_exact_beta1(model: OutcomesModel, spec: DesignSpec, clustering: Clustering | None = None):
    """Exact variance for a linear model under a single-round clustered CRD rollout."""
    if model.beta != 1 or spec.steps != 1:
        raise AssumptionError("exact variance needs beta = 1 and a single rollout round")
    if spec.kind is DesignKind.UNIT_BERNOULLI:
        raise AssumptionError("exact variance covers CRD designs only")
    cl = _design_clustering(spec, model.n, clustering)
    n = model.n
    p, q = spec.p, spec.q
    pn = p * n
    if pn == q:
        raise ZeroDivisionError("eligible set of size one (pn = q) makes the formula undefined")
    L = model.influence_L()
    var_L = var_hat(L)
    first = (1 - q) / (pn - q)
    if q > p:
        if cl.n_c == 1:
            raise ZeroDivisionError("one cluster with q > p makes the formula undefined")
        second = (q - p) * (pn - 1) / (p * (cl.n_c - 1) * (pn - q))
        var_lbar = model.cluster_influence_variance(cl)
    else:
        second, var_lbar = 0, 0
    if isinstance(var_L, (float, np.floating)) or isinstance(var_lbar, (float, np.floating)):
        return float(first) * float(var_L) + float(second) * float(var_lbar)
    return first * var_L + second * var_lbar


def lemma1_var(L: Sequence, p) -> object:
    """Variance of ``(1/(p m)) sum_i L_i z_i`` for ``z ~ CRD(p m, m)``."""
    m = len(L)
    pf = Fraction(p) if not isinstance(p, float) else Fraction(p).limit_denominator(1_000_000)
    k = pf * m
    if k.denominator != 1 or not 1 <= k <= m - 1:
        raise ValueError(f"p*|L| = {k} must be a whole number in [1, |L| - 1]")
    v = var_hat(L)
    if isinstance(v, (float, np.floating)):
        return (1 - float(pf)) / (float(pf) * (m - 1)) * v
    return (1 - pf) / (pf * (m - 1)) * v


# -- exhaustive oracle ------------------------------------------------------


def _exact_table(model: OutcomesModel) -> list[dict[tuple, Fraction]]:
    if isinstance(model, SymmetricSynthModel):
        model = materialize(model)
    if not isinstance(model, CoefficientModel):
        raise TypeError("oracle needs a coefficient model")
    return [{s: Fraction(v) for s, v in row.items()} for row in model.coeffs]


def _total_outcome(table, treated: frozenset) -> Fraction:
    total = Fraction(0)
    for row in table:
        for s, c in row.items():
            if all(j in treated for j in s):
                total += c
    return total


def _oracle_outcomes(model: OutcomesModel, spec: DesignSpec):
    """Yield ``(probability, estimate)`` over every stage-1 choice and rollout ordering."""
    n = model.n
    if n > ORACLE_MAX_N:
        raise ValueError(f"oracle enumeration limited to n <= {ORACLE_MAX_N}")
    if not spec.kind.is_crd:
        raise ValueError("oracle covers CRD designs only")
    sizes = spec.validate(n)
    u_size = sizes.u_size
    if math.factorial(u_size) > ORACLE_MAX_ORDERINGS:
        raise ValueError("too many rollout orderings to enumerate")
    if spec.kind is DesignKind.CLUSTERED_CRD:
        cl = spec.clustering
        u_choices = [
            tuple(sorted(j for c in chosen for j in cl.members[c].tolist()))
            for chosen in itertools.combinations(range(cl.n_c), sizes.clusters_selected)
        ]
    elif spec.kind is DesignKind.UNIT_CRD:
        u_choices = list(itertools.combinations(range(n), u_size))
    else:
        u_choices = [tuple(range(n))]

    table = _exact_table(model)
    h = h_coeffs(spec.steps, spec.q, exact=True)
    memo: dict[frozenset, Fraction] = {}
    p_u = Fraction(1, len(u_choices))
    p_order = Fraction(1, math.factorial(u_size))
    for u in u_choices:
        for order in itertools.permutations(u):
            sums = []
            for c in sizes.per_step:
                key = frozenset(order[:c])
                if key not in memo:
                    memo[key] = _total_outcome(table, key)
                sums.append(memo[key])
            est = pi_two_stage(RolloutObservations(sums, n), spec.p, spec.q, h=h)
            yield p_u * p_order, est


def oracle_moments(model: OutcomesModel, spec: DesignSpec) -> tuple[Fraction, Fraction]:
    """Exact mean and variance of the two-stage estimate by full enumeration."""
    m1 = Fraction(0)
    m2 = Fraction(0)
    for prob, est in _oracle_outcomes(model, spec):
        m1 += prob * est
        m2 += prob * est * est
    return m1, m2 - m1 * m1


def oracle_expectation(model: OutcomesModel, spec: DesignSpec) -> Fraction:
    return oracle_moments(model, spec)[0]


def oracle_variance(model: OutcomesModel, spec: DesignSpec) -> Fraction:
    return oracle_moments(model, spec)[1]


def exact_tte(model: OutcomesModel) -> Fraction:
    """TTE straight from the coefficient table, in exact arithmetic."""
    table = _exact_table(model)
    return sum((c for row in table for s, c in row.items() if s), Fraction(0)) / len(table)


def beta1_q_optimality(
    model: OutcomesModel, clustering: Clustering, p, q_grid: Sequence, rel_tol: float = 1e-12
):
    """Evaluate the exact linear-model variance over ``q_grid`` and return ``(argmin_q, values)``.

    Ties (within ``rel_tol``) go to the smallest ``q``. Refuses unless every
    ``L_j`` has the same sign.
    """
    L = model.influence_L()
    if any(x > 0 for x in L) and any(x < 0 for x in L):
        raise AssumptionError("influences L_j have mixed signs")
    kind = DesignKind.CLUSTERED_CRD if clustering.n_c < model.n else DesignKind.UNIT_CRD
    values = []
    for q in sorted(q_grid, key=float):
        spec = DesignSpec(kind, p, q, 1, clustering if kind is DesignKind.CLUSTERED_CRD else None)
        values.append((spec.q, var_exact_beta1(model, spec, clustering)))
    best_q, best_v = values[0]
    for q, v in values[1:]:
        if float(v) < float(best_v) - rel_tol * max(abs(float(best_v)), 1e-300):
            best_q, best_v = q, v
    return best_q, values
