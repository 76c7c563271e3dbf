import numpy as np
import pytest
from hypothesis import given, strategies as st

from oldroyd_bl import ModelParams, SolverError, StripGrid, ZGrid
from oldroyd_bl.composite import AsymptoticRun
from oldroyd_bl.outer import (COMPONENTS, trace_weights, LinearizedOuterState, OuterState, divergence_norm,
                              extract_traces, make_well_prepared, max_stable_dt, step_diffusive,
                              step_limit, step_linearized, trace_sample)

P = ModelParams(1.0, 1.0, 1.0, 0.05)

# seed 42 on the default 64x256 strip (Ly = 8, stretch 1.02), delta = 0.5
DATUM_L2 = {"u1": 4.516627533209608, "u2": 4.531803966806521, "eta": 7.748528933260158,
            "t11": 7.188928590818038, "t12": 0.7956818551246194, "t22": 7.128846954529777}
# order-2 outer fields after 50 steps of dt = 1e-3 on a 16x96 strip, 128 z-nodes
I2_L2 = {"u1": 0.059226530218306046, "u2": 0.014957335634931136, "eta": 0.22305678623242312,
         "t11": 0.49322374728039003, "t12": 0.7934139025178603, "t22": 0.4073076959114475}


def roundoff(g, values, m):
    """Round-off bound for an m-th derivative trace of a y-constant column."""
    return 1e-14 * np.sum(np.abs(trace_weights(g)[m])) * np.max(np.abs(values))


def l2(g, a):
    return {k: float(np.sqrt(g.integrate(v ** 2))) for k, v in a.items()}


@pytest.fixture(scope="module")
def grid():
    return StripGrid(32, 96, Ly=8.0, stretch=1.02)


@pytest.fixture(scope="module")
def datum(grid):
    return make_well_prepared(42, grid, 0.5).state()


class TestDiffusive:
    def test_rest_state(self, grid):
        s = OuterState.zeros(grid)
        for _ in range(5):
            s = step_diffusive(s, P, 1e-2)
        assert all(not np.any(v) for v in s.arrays().values())

    @pytest.mark.parametrize("stepper", [step_diffusive, step_limit])
    def test_constant_density_steady(self, grid, stepper):
        a = {n: np.zeros(grid.shape) for n in COMPONENTS}
        a["eta"] = np.full(grid.shape, 2.5)
        s = OuterState.from_arrays(grid, a)
        for _ in range(5):
            s = stepper(s, P, 1e-2)
        b = s.arrays()
        assert np.max(np.abs(b["eta"] - 2.5)) < 1e-13
        assert max(np.max(np.abs(b[n])) for n in COMPONENTS if n != "eta") < 1e-13

    def test_divergence_free_every_step(self, datum):
        s = datum
        for _ in range(10):
            s = step_diffusive(s, P, 1e-3)
            d, gnorm = divergence_norm(s)
            assert d <= 1e-10 * gnorm + 1e-13

    def test_no_slip(self, datum):
        s = step_diffusive(step_diffusive(datum, P, 1e-3), P, 1e-3)
        assert not np.any(s.vel.u1.values[:, [0, -1]]) and not np.any(s.vel.u2.values[:, [0, -1]])

    def test_deterministic(self, datum):
        run = lambda: [step_diffusive(datum, P, 1e-3)]
        a, b = run()[0].arrays(), run()[0].arrays()
        assert all(np.array_equal(a[n], b[n]) for n in COMPONENTS)

    def test_cfl_guard(self, datum):
        dt = max_stable_dt(datum.grid, datum.vel.u1.values, datum.vel.u2.values)
        with pytest.raises(SolverError) as e:
            step_diffusive(datum, P, 2 * dt)
        assert e.value.code == "unstable-dt"

    def test_mms_slope_smoke(self):
        """Short two-grid spatial study; the full study lives in the acceptance suite."""
        from oldroyd_bl.harness.experiments import _l2_groups, _mms_run
        params = ModelParams(1.0, 1.0, 1.0, 0.1)
        errs = []
        for nx, ny in ((16, 24), (32, 48)):
            g, s, E = _mms_run(nx, ny, 2e-4, 0.01, params)
            errs.append(_l2_groups(g, s.arrays(), {n: E[n](g.X, g.Y, 0.01) for n in COMPONENTS}))
        for q in ("u", "eta", "tau"):
            assert np.log2(errs[0][q] / errs[1][q]) > 1.8


class TestLimit:
    def test_eps_zero_path_identical(self, datum):
        a = step_limit(datum, P, 1e-3).arrays()
        b = step_diffusive(datum, P.with_eps(0.0), 1e-3).arrays()
        assert all(np.array_equal(a[n], b[n]) for n in COMPONENTS)

    def test_stress_decay(self):
        """u = 0 and a stress whose divergence is a gradient: u stays 0 and
        tau decays like exp(-gamma t)."""
        g = StripGrid(16, 48, Ly=4.0, stretch=1.0)
        a = {n: np.zeros(g.shape) for n in COMPONENTS}
        a["eta"] = np.ones(g.shape)
        a["t11"] = 1 + 0.3 * np.cos(g.Y)
        a["t22"] = 2 + 0.5 * np.sin(g.Y)
        t0 = {n: a[n].copy() for n in ("t11", "t12", "t22")}
        s = OuterState.from_arrays(g, a)
        worst = 0.0
        for n in range(1, 1001):
            s = step_limit(s, P, 1e-3)
            b = s.arrays()
            worst = max(worst, max(np.max(np.abs(b[k] - np.exp(-n * 1e-3) * t0[k])) for k in t0))
        assert worst <= 1e-8
        assert np.max(np.abs(s.vel.u1.values)) < 1e-10


class TestLinearized:
    def test_zero_background(self, grid):
        z = OuterState.zeros(grid)
        s = LinearizedOuterState.zeros(grid)
        zn = OuterState.from_arrays(grid, z.arrays(), time=1e-3, steps=1)
        w = (np.zeros(grid.nx), np.zeros(grid.nx))
        out = step_linearized(s, z, zn, P, 1e-3, w)
        assert all(not np.any(v) for v in out.arrays().values())

    def test_density_source_integrates_linearly(self, grid):
        a = {n: np.zeros(grid.shape) for n in COMPONENTS}
        a["eta"] = 1 + 0.5 * np.cos(grid.X) * np.exp(-grid.Y)
        src_eta = grid.dxx(a["eta"]) + grid.dyy(a["eta"])
        src = {"eta": src_eta, "t11": np.zeros(grid.shape), "t12": np.zeros(grid.shape),
               "t22": np.zeros(grid.shape)}
        s = LinearizedOuterState.zeros(grid)
        dt = 1e-2
        w = (np.zeros(grid.nx), np.zeros(grid.nx))
        for n in range(20):
            bg = OuterState.from_arrays(grid, a, time=n * dt, steps=n)
            bgn = OuterState.from_arrays(grid, a, time=(n + 1) * dt, steps=n + 1)
            s = step_linearized(s, bg, bgn, P, dt, w, src)
        assert np.max(np.abs(s.eta.values - 20 * dt * src_eta)) <= 1e-6

    def test_misaligned_background(self, grid):
        z = OuterState.zeros(grid)
        s = LinearizedOuterState.zeros(grid)
        with pytest.raises(SolverError) as e:
            step_linearized(s, z, z, P, 1e-3, (np.zeros(grid.nx), np.zeros(grid.nx)))
        assert e.value.code == "trajectory-misaligned"

    def test_pipeline_bounded(self):
        g = StripGrid(16, 96, Ly=8.0, stretch=1.02)
        run = AsymptoticRun(make_well_prepared(42, g, 0.5).state(), ModelParams(), 1e-3,
                            ZGrid(128), max_order=2)
        for _ in range(50):
            snap = run.step()
        got = l2(g, snap.I2.arrays())
        for k, v in I2_L2.items():
            assert got[k] == pytest.approx(v, rel=1e-8)


class TestTraces:
    def test_cubic_exact(self, grid):
        a = {n: np.zeros(grid.shape) for n in COMPONENTS}
        a["eta"] = grid.Y ** 3
        tr = trace_sample(OuterState.from_arrays(grid, a))
        assert np.max(np.abs(tr.get("eta", 1))) < 1e-10
        assert np.max(np.abs(tr.get("eta", 2))) < 1e-9
        assert np.max(np.abs(tr.get("eta", 3) - 6)) < 1e-8

    def test_sine_fourth_order(self):
        errs = []
        for ny in (64, 128):
            g = StripGrid(8, ny, Ly=8.0, stretch=1.0)
            a = {n: np.zeros(g.shape) for n in COMPONENTS}
            a["t12"] = np.sin(g.Y)
            errs.append(np.max(np.abs(trace_sample(OuterState.from_arrays(g, a)).get("t12", 1) - 1)))
        assert errs[0] / errs[1] > 12

    def test_well_prepared_flat(self, datum):
        tr = extract_traces([datum])
        a = datum.arrays()
        for n in ("eta", "t11", "t12", "t22"):
            for m in (1, 2, 3):
                assert np.max(np.abs(tr.samples[0].get(n, m))) <= roundoff(datum.grid, a[n], m)

    def test_lookup(self, datum):
        tr = extract_traces([datum])
        assert tr.at_time(0.0) is tr.samples[0]
        with pytest.raises(SolverError):
            tr.at_time(1.0)


class TestWellPrepared:
    @given(seed=st.integers(0, 2 ** 31 - 1))
    def test_divergence_free_and_flat(self, seed):
        g = StripGrid(16, 64, Ly=8.0, stretch=1.02)
        s = make_well_prepared(seed, g, 0.5).state()
        d, gn = divergence_norm(s)
        assert d <= 1e-10 * max(gn, 1.0)
        tr = trace_sample(s)
        a = s.arrays()
        for n in ("eta", "t11", "t12", "t22"):
            for m in (1, 2, 3):
                assert np.max(np.abs(tr.get(n, m))) <= roundoff(g, a[n], m)

    def test_reference_norms(self):
        g = StripGrid(64, 256, Ly=8.0, stretch=1.02)
        got = l2(g, make_well_prepared(42, g, 0.5).state().arrays())
        for k, v in DATUM_L2.items():
            assert got[k] == pytest.approx(v, rel=1e-12)

    def test_delta_range(self, grid):
        with pytest.raises(SolverError):
            make_well_prepared(1, grid, 3.0)
