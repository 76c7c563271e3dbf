"""Acceptance checks, one per criterion.  Each test records its sub-checks in
``conftest.ACCEPTANCE``; the terminal summary prints one line per criterion.

The convergence experiments take minutes; they are marked ``slow`` and can
be skipped with ``-m "not slow"``.
"""
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE
from oldroyd_bl.harness import experiments as ex
from oldroyd_bl.harness.config import ExperimentConfig
from oldroyd_bl.harness.report import report_json
from oldroyd_bl.layer import PrototypeProblem, solve_prototype
from oldroyd_bl.oracle import duhamel_reaction_solution, erfc_flux_solution
from oldroyd_bl.profiles import ZGrid

BUDGET_S = {1: 300, 2: 60, 4: 1800, 6: 1200}


def record(criterion, label, passed, detail, seconds=0.0):
    ACCEPTANCE.setdefault(criterion, []).append((label, bool(passed), detail, seconds))
    return bool(passed)


def slope_check(criterion, report, names):
    ok = True
    for n in names:
        r = report.row(n)
        lo, hi = r.target
        slope = float("nan") if r.fit is None else r.fit.slope
        rng_ = f"[{'' if lo is None else lo}, {'' if hi is None else hi}]"
        ok &= record(criterion, n, r.passed, f"slope={slope:.3f} target {rng_}")
    return ok


def budget(criterion, seconds):
    return record(criterion, "runtime", seconds <= BUDGET_S[criterion],
                  f"{seconds:.0f}s <= {BUDGET_S[criterion]}s", seconds)


@pytest.fixture(scope="module")
def cfg():
    return ExperimentConfig().validate()


@pytest.fixture(scope="module")
def limit_rates(cfg):
    t0 = time.perf_counter()
    rep = ex.run_limit_rates(cfg)
    return rep, time.perf_counter() - t0


@pytest.fixture(scope="module")
def residual_order(cfg):
    t0 = time.perf_counter()
    rep = ex.run_residual_order(replace_experiment(cfg, "residual-order"), fidelities=("order3",))
    return rep, time.perf_counter() - t0


def replace_experiment(cfg, name):
    return replace(cfg, experiment=name)


@pytest.mark.slow
def test_criterion_1_mms_order(cfg):
    t0 = time.perf_counter()
    rep = ex.run_mms(replace_experiment(cfg, "mms"))
    dt = time.perf_counter() - t0
    names = [f"{k}_{q}" for k in ("space", "time") for q in ("u", "eta", "tau")]
    ok = slope_check(1, rep, names)
    ok &= budget(1, dt)
    assert ok, [(r.quantity, r.fit and r.fit.slope) for r in rep.rows]


def _prototype_errors(problem, oracle, nz=1024, dt=1e-4, T=1.0):
    zg = ZGrid(nz)
    n = round(T / dt)
    traj = solve_prototype(problem, zg, dt, n)
    # every early step, then a log-spaced sample up to t = T
    idx = sorted(set(range(1, 11)) | set(np.unique(np.geomspace(10, n, 40).astype(int))))
    errs = {k * dt: float(np.max(np.abs(traj[k - 1].values[0] - oracle(zg.z, k * dt))))
            for k in idx}
    return errs


def test_criterion_2_prototype_oracle():
    t0 = time.perf_counter()
    heat = _prototype_errors(PrototypeProblem(0.0, 0.0, 0.0, -1.0),
                             lambda z, t: erfc_flux_solution(1.0, z, t))
    react = _prototype_errors(PrototypeProblem(1.0, 0.0, 0.0, -1.0),
                              lambda z, t: duhamel_reaction_solution(1.0, 1.0, z, t))
    dt = time.perf_counter() - t0
    ok = True
    for lbl, errs in (("heat", heat), ("reaction", react)):
        ok &= record(2, f"{lbl} t=1", errs[1.0] <= 1e-5, f"max err {errs[1.0]:.2e} <= 1e-5")
        tmax = max(errs, key=errs.get)
        ok &= record(2, f"{lbl} sup over t in (0,1]", errs[tmax] <= 1e-5,
                     f"{errs[tmax]:.2e} at t={tmax:.1e}")
    ok &= budget(2, dt)
    assert ok, (heat, react)


def test_criterion_3_scaling_identity(cfg):
    t0 = time.perf_counter()
    rep = ex.run_scaling(replace_experiment(cfg, "scaling-identity"))
    dt = time.perf_counter() - t0
    ok = True
    for fx in rep.extras["fixtures"]:
        name = f"{fx['profile']} eps={fx['eps']:g} m={fx['m']}"
        ok &= record(3, name, fx["passed"], f"rel_err={fx['rel_err']:.2e} <= 1e-4")
    record(3, "runtime", True, f"{dt:.1f}s", dt)
    assert ok and len(rep.extras["fixtures"]) == 3


@pytest.mark.slow
def test_criterion_4_limit_rates(limit_rates):
    rep, dt = limit_rates
    names = ["u", "eta", "tau", "eta_y_corrected", "tau_y_corrected"]
    ok = slope_check(4, rep, names)
    ok &= record(4, "complete", not rep.incomplete, f"incomplete={len(rep.incomplete)}")
    ok &= budget(4, dt)
    assert ok, [(r.quantity, r.fit and r.fit.slope) for r in rep.rows]


@pytest.mark.slow
def test_criterion_5_layer_signature(limit_rates):
    rep, _ = limit_rates
    ok = slope_check(5, rep, ["eta_y_no_corrector"])
    u = rep.row("u")
    ok &= record(5, "solution-level u vanishes", u.passed, f"slope={u.fit.slope:.3f}")
    assert ok


@pytest.mark.slow
def test_criterion_6_residual_order(residual_order):
    rep, dt = residual_order
    names = [r.quantity for r in rep.rows if r.asserted]
    ok = slope_check(6, rep, names)
    ok &= budget(6, dt)
    assert ok, [(r.quantity, r.fit and r.fit.slope, r.table) for r in rep.rows]


@pytest.mark.slow
def test_criterion_7_invariants(limit_rates, residual_order):
    lim, _ = limit_rates
    res, _ = residual_order
    inv = res.extras["invariants"]
    checks = [
        ("solver divergence", lim.extras["max_rel_divergence"] <= 1e-10,
         f"{lim.extras['max_rel_divergence']:.1e} <= 1e-10"),
        ("stress symmetry", lim.extras["stress_symmetry"].startswith("structural"),
         "three stored components"),
        ("p_b1 == t22_b1", lim.extras["p_b1_equals_t22_b1"] and inv["p_b1_equals_t22_b1"],
         "exact"),
        ("composite no-slip", inv["no_slip"] <= 1e-10, f"{inv['no_slip']:.1e} <= 1e-10"),
    ]
    for j in (2, 3, 4):
        v = inv[f"chain_{j}"]
        checks.append((f"chain j={j}", v <= 1e-8, f"{v:.1e} <= 1e-8"))
    checks.append(("limit run divergence", inv["max_rel_divergence_I0"] <= 1e-10,
                   f"{inv['max_rel_divergence_I0']:.1e} <= 1e-10"))
    ok = all([record(7, *c) for c in checks])
    assert ok, checks


def test_criterion_8_determinism(cfg):
    t0 = time.perf_counter()
    small = replace(cfg, experiment="regression", T=0.02)
    texts = {th: report_json(ex.run_regression(small, threads=th), small) for th in (1, 4)}
    again = report_json(ex.run_regression(small, threads=1), small)
    sc = [report_json(ex.run_scaling(replace_experiment(cfg, "scaling-identity"), threads=th),
                      replace_experiment(cfg, "scaling-identity")) for th in (1, 3)]
    dt = time.perf_counter() - t0
    same = texts[1] == texts[4] == again and sc[0] == sc[1]
    record(8, "bitwise reports across thread counts", same, "regression, scaling-identity", dt)
    assert same
