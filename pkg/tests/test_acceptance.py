"""Acceptance criteria, one test per criterion, each reporting a PASS/FAIL line."""

import contextlib
import json
import math
import os
import subprocess
import sys
import time
from fractions import Fraction

import numpy as np
import pytest
import sympy
from scipy.stats import spearmanr

from rollout_sim import harness
from rollout_sim.clustering import Clustering, var_hat, cut_edges, grid_clustering
from rollout_sim.design import (
    DesignKind,
    DesignSpec,
    check_realization,
    prob_set_in_U,
    replication_rng,
    sample,
)
from rollout_sim.estimators import RolloutObservations, h_coeffs, pi_one_stage, pi_two_stage
from rollout_sim.netgraph import lattice
from rollout_sim.outcomes import CoefficientModel, SymmetricSynthModel, random_coefficient_model
from rollout_sim.theory import (
    bias_closed,
    exact_tte,
    oracle_expectation,
    oracle_moments,
    oracle_variance,
    var_bound_thm3,
    var_exact_beta1,
)

F = Fraction


@contextlib.contextmanager
def criterion(log, number, title, budget_s=None):
    notes: list[str] = []
    t0 = time.perf_counter()
    try:
        yield notes
        elapsed = time.perf_counter() - t0
        if budget_s is not None:
            assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s}s"
    except BaseException as e:
        line = f"FAIL criterion {number:>2}: {title} ({type(e).__name__}: {e})"
        log.append(line)
        print(line)
        raise
    line = f"PASS criterion {number:>2}: {title} [{elapsed:.1f}s]" + (f" {'; '.join(notes)}" if notes else "")
    log.append(line)
    print(line)


def mc_se_of_var(est):
    c = np.asarray(est) - np.mean(est)
    return math.sqrt(max(np.mean(c**4) - np.mean(c**2) ** 2, 0.0) / len(c))


def test_c01_cut_edges(acceptance_log):
    with criterion(acceptance_log, 1, "cut-edge exactness on lattice(100)", budget_s=1.0) as notes:
        g = lattice(100)
        coarse = cut_edges(g, grid_clustering(100, 10))
        fine = cut_edges(g, grid_clustering(100, 2))
        assert coarse == 3600
        assert fine == 19600
        notes.append(f"coarse={coarse} fine={fine}")


def test_c02_cut_effect(acceptance_log):
    with criterion(acceptance_log, 2, "cut-effect reproduction", budget_s=10.0) as notes:
        g = lattice(100)
        m = SymmetricSynthModel(g, beta=3, a=1.0, b=0.0, sigma=0.0, delta=0.5)
        coarse = m.cut_effect(grid_clustering(100, 10))
        fine = m.cut_effect(grid_clustering(100, 2))
        assert abs(coarse - 0.1229) <= 0.03
        assert abs(fine - 0.5703) <= 0.05
        notes.append(f"coarse={coarse:.4f} fine={fine:.4f}")


def _bias_instances():
    out = []
    for seed in (101, 202):
        out.extend(harness.tiny_instances(np.random.default_rng(seed)))
    return out


def test_c03_bias_oracle(acceptance_log):
    with criterion(acceptance_log, 3, "bias oracle equivalence", budget_s=120.0) as notes:
        inst = _bias_instances()
        assert len(inst) >= 20
        assert {m.beta for m, _ in inst} == {1, 2, 3}
        assert {s.kind for _, s in inst} == {DesignKind.UNIT_CRD, DesignKind.CLUSTERED_CRD}
        worst = 0
        for model, spec in inst:
            assert model.n <= 8
            gap = oracle_expectation(model, spec) - exact_tte(model)
            closed = bias_closed(model, spec).closed_form
            worst = max(worst, abs(gap - closed))
            assert abs(gap - closed) <= 1e-10
        notes.append(f"{len(inst)} instances, max |diff| = {float(worst):.1e}")


def test_c04_unbiased_at_q_equals_p(acceptance_log):
    with criterion(acceptance_log, 4, "unbiasedness at q = p", budget_s=300.0) as notes:
        inst = harness.tiny_instances(np.random.default_rng(303), q_equals_p=True)
        for model, spec in inst:
            assert oracle_expectation(model, spec) == exact_tte(model)
        s = harness.Setup(lattice(20), SymmetricSynthModel(lattice(20), beta=3), {}, 3)
        rec = harness.run_point(s, DesignKind.UNIT_CRD, F(3, 20), F(3, 20), R=10_000, seed=4)
        se = math.sqrt(rec.var_emp / rec.R)
        assert abs(rec.bias_emp) <= 3 * se
        notes.append(f"{len(inst)} exact instances; MC bias {rec.bias_emp:.2e} vs 3SE {3 * se:.2e}")


def test_c05_beta1_exact_variance(acceptance_log):
    with criterion(acceptance_log, 5, "beta=1 exact variance", budget_s=60.0) as notes:
        rng = np.random.default_rng(505)
        count = 0
        for model, spec in harness.tiny_instances(rng) + harness.tiny_instances(rng):
            if model.beta != 1 or spec.kind is not DesignKind.CLUSTERED_CRD:
                continue
            assert abs(oracle_variance(model, spec) - var_exact_beta1(model, spec)) <= 1e-10
            count += 1
        assert count >= 4
        # limits, on concrete rational instances
        for _ in range(5):
            m = random_coefficient_model(harness.random_digraph(8, rng), 1, rng, nonneg=False)
            cl = Clustering(np.arange(8) // 2)
            p = F(1, 4)
            assert var_exact_beta1(m, DesignSpec(DesignKind.CLUSTERED_CRD, p, F(1), 1, cl)) == (1 - p) / (p * 3) * m.cluster_influence_variance(cl)
            assert var_exact_beta1(m, DesignSpec(DesignKind.CLUSTERED_CRD, p, p, 1, cl)) == (1 - p) / (p * 7) * var_hat(m.influence_L())
        # limits, symbolically
        p, q, n, nc, vl, vb = sympy.symbols("p q n n_c V_L V_Lbar", positive=True)
        formula = (1 - q) / (p * n - q) * vl + (q - p) * (p * n - 1) / (p * (nc - 1) * (p * n - q)) * vb
        assert sympy.simplify(formula.subs(q, 1) - (1 - p) / (p * (nc - 1)) * vb) == 0
        assert sympy.simplify(formula.subs(q, p) - (1 - p) / (p * (n - 1)) * vl) == 0
        notes.append(f"{count} clustered oracle instances; limits exact")


def test_c06_variance_bound_dominance(acceptance_log):
    with criterion(acceptance_log, 6, "variance bound dominance", budget_s=300.0) as notes:
        inst = harness.tiny_instances(np.random.default_rng(606), nonneg=True)
        tightest = math.inf
        for model, spec in inst:
            v = float(oracle_variance(model, spec))
            b = var_bound_thm3(model, spec).bound_thm3
            # beta=1, q=1 with no cut term is an equality case; allow float rounding of the bound only
            assert v <= b * (1 + 1e-12)
            if v > 0:
                tightest = min(tightest, b / v)
        g = lattice(20)
        cl = grid_clustering(20, 2)
        s = harness.Setup(g, SymmetricSynthModel(g, beta=3), {cl.name: cl}, 3)
        for q in (F(3, 20), F(3, 8), F(3, 4), F(1)):
            rec = harness.run_point(s, DesignKind.CLUSTERED_CRD, F(3, 20), q, cl.name, R=2000, seed=6)
            assert rec.var_emp <= rec.var_bound + 3 * mc_se_of_var(rec.estimates)
        notes.append(f"{len(inst)} exact instances (min bound/var {tightest:.2f}); lattice(20) at 4 q values")


def test_c07_estimator_identities(acceptance_log):
    with criterion(acceptance_log, 7, "estimator identities") as notes:
        rng = np.random.default_rng(707)
        assert h_coeffs(3, F(1), exact=True) == [-1, 0, 0, 1]
        checked = 0
        for model, spec in harness.tiny_instances(rng):
            table = [{s: F(c) for s, c in row.items()} for row in model.coeffs]
            for r in range(20):
                real = sample(spec, model.n, replication_rng(7, r))
                sums = []
                for t in range(spec.steps + 1):
                    z = real.z(t)
                    sums.append(sum(c for row in table for s, c in row.items() if all(z[j] for j in s)))
                obs = RolloutObservations(sums, model.n)
                n, p, beta = model.n, spec.p, spec.steps
                assert pi_two_stage(obs, p, F(1)) == (sums[beta] - sums[0]) / (n * p)
                if beta == 1:
                    assert pi_two_stage(obs, p, spec.q) == pi_one_stage(obs, p)
                    assert pi_two_stage(obs, p, p) == pi_one_stage(obs, p)
                checked += 1
        notes.append(f"{checked} realizations")


def test_c08_lagrange_properties(acceptance_log):
    with criterion(acceptance_log, 8, "Lagrange weight properties") as notes:
        q_grid = [F(k, 20) for k in range(1, 21)]
        for beta in range(1, 9):
            for q in q_grid:
                h = h_coeffs(beta, q, exact=True)
                assert sum(h) == 0
                assert all(abs(x) <= (F(beta) / q) ** beta for x in h)
        rng = np.random.default_rng(808)
        worst = 0.0
        for _ in range(1000):
            beta = int(rng.integers(1, 7))
            q = q_grid[int(rng.integers(3, 20))]
            coef = [F(c) for c in rng.normal(size=beta + 1)]

            def f(x):
                return sum(c * x**k for k, c in enumerate(coef))

            h = h_coeffs(beta, q, exact=True)
            got = sum(ht * f(t * q / beta) for t, ht in enumerate(h))
            worst = max(worst, abs(float(got - (f(1) - f(0)))))
            hf = h_coeffs(beta, float(q))
            assert all(abs(a - float(b)) <= 1e-15 * abs(float(b)) for a, b in zip(hf, h))
        assert worst <= 1e-9
        notes.append(f"max exactness error {worst:.1e}")


def test_c09_sweep_shape(acceptance_log):
    with criterion(acceptance_log, 9, "qualitative sweep shape on lattice(100)", budget_s=1200.0) as notes:
        cfg = harness.ExperimentConfig(
            network={"lattice": 100},
            model={"type": "symmetric", "beta": 3},
            designs=["TwoStageClusteredCRD"],
            clusterings=[{"method": "grid", "block": 10}],
            p_grid=[0.15],
            q_grid=[0.15, 0.1875, 0.25, 0.3, 0.375, 0.5, 0.6, 0.75, 1.0],
            R=500,
            decompose=False,
            seed=0,
        )
        recs = harness.sweep(cfg).records
        qs = [r.q for r in recs]
        assert len(qs) == 9
        rho_bias = spearmanr(qs, [abs(r.bias_emp) for r in recs])[0]
        rho_var = spearmanr(qs, [r.var_emp for r in recs])[0]
        best = min(r.mse_emp for r in recs)
        at_p = next(r.mse_emp for r in recs if r.q == 0.15)
        assert rho_bias >= 0.8
        assert rho_var <= -0.8
        assert best < 0.5 * at_p
        notes.append(f"rho|bias|={rho_bias:.2f} rho_var={rho_var:.2f} mse best/at p={best / at_p:.3f}")


def test_c10_design_laws(acceptance_log):
    with criterion(acceptance_log, 10, "design-law checks", budget_s=120.0) as notes:
        n, draws = 20, 100_000
        pairs = Clustering(np.arange(n) // 2)
        specs = [
            DesignSpec(DesignKind.ONE_STAGE_CRD, F(1, 4), None, 5),
            DesignSpec(DesignKind.UNIT_CRD, F(1, 4), F(1, 2), 5),
            DesignSpec(DesignKind.CLUSTERED_CRD, F(1, 4), F(1, 2), 5, pairs),
            DesignSpec(DesignKind.UNIT_BERNOULLI, F(1, 4), F(1, 2), 5),
        ]
        test_sets = [[0], [0, 1], [0, 2], [3, 7, 11], [4, 5, 12]]
        worst = 0.0
        for spec in specs:
            in_u = np.zeros(n)
            hits = np.zeros(len(test_sets))
            for r in range(draws):
                real = sample(spec, n, replication_rng(10, r))
                if r < 20_000:
                    assert check_realization(spec, n, real) == []
                in_u += real.selected
                for k, S in enumerate(test_sets):
                    hits[k] += real.selected[S].all()
            marg = float(spec.p / spec.q)
            se = math.sqrt(marg * (1 - marg) / draws) if 0 < marg < 1 else 0.0
            for i in range(n):
                z = abs(in_u[i] / draws - marg)
                assert z <= 3 * se + 1e-12, (spec.kind.value, i, z, se)
                if se:
                    worst = max(worst, z / se)
            for k, S in enumerate(test_sets):
                pr = float(prob_set_in_U(spec, n, S))
                se_s = math.sqrt(pr * (1 - pr) / draws) if 0 < pr < 1 else 0.0
                assert abs(hits[k] / draws - pr) <= 3 * se_s + 1e-12, (spec.kind.value, S)
        notes.append(f"{len(specs)} designs x {draws} draws, worst marginal z={worst:.2f}")


def test_c11_determinism(acceptance_log, tmp_path):
    with criterion(acceptance_log, 11, "byte-identical sweep CSV at 1 and 8 threads") as notes:
        cfg = {
            "network": {"lattice": 10},
            "model": {"type": "symmetric", "beta": 2, "sigma": 0.1, "seed": 3},
            "designs": ["TwoStageClusteredCRD", "TwoStageUnitCRD"],
            "clusterings": [{"method": "grid", "block": 2}, {"method": "greedy", "nc": 25}],
            "p_grid": [0.2],
            "q_grid": [0.2, 0.5, 1.0],
            "R": 300,
            "n_outer": 10,
            "n_inner": 5,
            "seed": 42,
            "estimators": ["PI", "DM", "DM(0.75)", "HT", "Hajek"],
        }
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        outputs = []
        for threads in ("1", "8", "1", "8"):
            out = tmp_path / f"out{len(outputs)}.csv"
            env = dict(os.environ, ROLLOUT_SIM_THREADS=threads)
            subprocess.run(
                [sys.executable, "-m", "rollout_sim", "sweep", "--config", str(path), "--out", str(out)],
                check=True, env=env, capture_output=True,
            )
            outputs.append(out.read_bytes())
        assert all(o == outputs[0] for o in outputs)
        rows = len(outputs[0].splitlines()) - 1
        notes.append(f"{rows} rows, 4 runs identical")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
