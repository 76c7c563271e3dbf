import numpy as np
import pytest
from hypothesis import given, strategies as st

from oldroyd_bl import ModelParams, Profile1D, SolverError, ZGrid
from oldroyd_bl.layer import (LAYER2, LAYER3, TAIL_TOL, LayerHierarchy, PrototypeProblem,
                              PrototypeStepper, all_term_tags, cutoff, cutoff_integral,
                              divergence_chain, reconstruct_u_b2, solve_prototype,
                              solve_prototype_lifted, tail_integral)
from oldroyd_bl.norms import NormSpec, norm
from oldroyd_bl.oracle import duhamel_reaction_solution, erfc_flux_solution
from oldroyd_bl.outer import TraceSample
from oldroyd_bl.profiles import spectral_dx

NAMES = ("u1", "u2", "eta", "t11", "t12", "t22", "p")
LX = 2 * np.pi


def traces(nx, t, **given):
    """Wall traces that are zero except for ``given[(name, order)]``."""
    data = {(n, m): np.zeros(nx) for n in NAMES for m in range(4)}
    for key, v in given.items():
        name, order = key.rsplit("_", 1)
        data[(name, int(order))] = np.broadcast_to(np.asarray(v, dtype=float), (nx,)).copy()
    return TraceSample(t, LX, data)


def march(h, nsteps, dt, **given):
    for n in range(1, nsteps + 1):
        tr = traces(h.nx, n * dt, **given)
        h.advance_low(tr)
        h.advance_high(tr, traces(h.nx, n * dt))
    return h


def only(tag):
    return lambda t: t == tag


class TestCutoff:
    def test_constraints(self):
        assert cutoff(0.0) == 1.0 and cutoff(0.0, 1) == 0.0 and cutoff(0.0, 2) == 0.0
        assert cutoff(1.0) == 0.0 and cutoff(3.0, 1) == 0.0
        # C^2 at s = 1
        assert abs(cutoff(1 - 1e-9, 1)) < 1e-12 and abs(cutoff(1 - 1e-9, 2)) < 1e-6

    def test_integral(self):
        s = np.linspace(0, 1.5, 3001)
        num = np.concatenate([[0], np.cumsum((cutoff(s[1:]) + cutoff(s[:-1])) / 2 * np.diff(s))])
        assert np.max(np.abs(num - cutoff_integral(s))) < 1e-6

    def test_derivatives(self):
        s = np.linspace(0.05, 0.95, 19)
        h = 1e-6
        for m in (1, 2, 3):
            fd = (cutoff(s + h, m - 1) - cutoff(s - h, m - 1)) / (2 * h)
            assert np.max(np.abs(fd - cutoff(s, m))) < 1e-4
        with pytest.raises(ValueError):
            cutoff(0.5, 4)


class TestPrototype:
    def test_zero_data(self):
        out = solve_prototype(PrototypeProblem(1.0), ZGrid(128), 1e-2, 20)
        assert all(p.is_zero() for p in out)

    def test_heat_oracle(self):
        zg = ZGrid(512)
        th = solve_prototype(PrototypeProblem(0.0, 0.0, 0.0, -1.0), zg, 2e-4, 1250)[-1]
        assert np.max(np.abs(th.values[0] - erfc_flux_solution(1.0, zg.z, 0.25))) < 5e-5

    def test_reaction_oracle(self):
        zg = ZGrid(512)
        th = solve_prototype(PrototypeProblem(1.0, 0.0, 0.0, -1.0), zg, 2e-4, 1250)[-1]
        ref = duhamel_reaction_solution(1.0, 1.0, zg.z[::16], 0.25)
        assert np.max(np.abs(th.values[0, ::16] - ref)) < 5e-5

    def test_oracle_agreement_improves(self):
        errs = []
        for nz, dt in ((256, 4e-4), (512, 2e-4)):
            zg = ZGrid(nz)
            th = solve_prototype(PrototypeProblem(0.0, 0.0, 0.0, -1.0), zg, dt,
                                 int(round(0.2 / dt)))[-1]
            errs.append(np.max(np.abs(th.values[0] - erfc_flux_solution(1.0, zg.z, 0.2))))
        assert errs[0] / errs[1] > 3.0

    @pytest.mark.parametrize("closure", ["one-sided", "ghost"])
    def test_lifting_equivalence(self, closure):
        zg = ZGrid(256)
        x = np.arange(8) * LX / 8
        prob = PrototypeProblem(0.5, 0.2 * (1 + np.cos(x)), lambda t: np.exp(-zg.z)[None, :] * t,
                                lambda t: np.sin(x) * (1 + t))
        a = solve_prototype(prob, zg, 1e-3, 200, nx=8, closure=closure)
        b = solve_prototype_lifted(prob, zg, 1e-3, 200, nx=8, closure=closure)
        assert max(np.max(np.abs(p.values - q.values)) for p, q in zip(a, b)) <= 1e-8

    @given(seed=st.integers(0, 10 ** 6))
    def test_sign_preserving(self, seed):
        r = np.random.default_rng(seed)
        zg = ZGrid(128)
        nx = 4
        prob = PrototypeProblem(r.uniform(0, 2), r.uniform(0, 2, nx),
                                -r.uniform(0, 1, (nx, 1)) * np.exp(-zg.z * r.uniform(2, 4)),
                                r.uniform(0, 1, nx))
        out = solve_prototype(prob, zg, r.choice([1e-3, 1e-2]), 30, nx=nx)
        for p in out:
            assert np.max(p.values) <= 1e-12 * max(1.0, np.max(np.abs(p.values)))

    def test_columns_independent(self):
        zg = ZGrid(128)
        g = np.array([0.0, 1.0, 0.0, -2.0, 0.0, 0.0, 0.0, 0.0])
        out = solve_prototype(PrototypeProblem(1.0, 0.0, 0.0, g), zg, 1e-2, 10, nx=8)[-1]
        single = solve_prototype(PrototypeProblem(1.0, 0.0, 0.0, -2.0), zg, 1e-2, 10)[-1]
        assert not np.any(out.values[[0, 2, 4, 5, 6, 7]])
        assert np.max(np.abs(out.values[3] - single.values[0])) < 1e-14

    def test_box_too_small(self):
        zg = ZGrid(128, 10.0)
        with pytest.raises(SolverError) as e:
            solve_prototype(PrototypeProblem(0.0, 0.0, 0.0, -1.0), zg, 0.1, 200)
        assert e.value.code == "layer-box-too-small"

    def test_weighted_decay(self):
        zg = ZGrid(256)
        th = solve_prototype(PrototypeProblem(1.0, 0.0, 0.0, -1.0), zg, 1e-2, 50)[-1]
        assert np.isfinite(norm(th, NormSpec("weighted", weight=2.0, inner=NormSpec("L2"))))
        assert th.tail <= TAIL_TOL * max(1.0, np.max(np.abs(th.values)))

    def test_diverged(self):
        st_ = PrototypeStepper(ZGrid(64), 1, 0.0, 1e-2)
        with pytest.raises(SolverError) as e:
            st_.step(r=np.full((1, 64), np.nan))
        assert e.value.code == "diverged"


class TestReconstruction:
    def test_zero(self):
        assert reconstruct_u_b2(Profile1D.zeros(ZGrid(128), 4), 2.0).is_zero()

    def test_exponential(self):
        zg = ZGrid(4096, 40.0)
        u = reconstruct_u_b2(Profile1D(zg, 2.0 * np.exp(-zg.z)[None, :]), 2.0)
        assert np.max(np.abs(u.values[0] - np.exp(-zg.z))) <= 1e-8

    @given(seed=st.integers(0, 10 ** 6))
    def test_differentiate_back(self, seed):
        r = np.random.default_rng(seed)
        zg = ZGrid(2048)
        z = zg.z
        f = sum(r.normal() * z ** j * np.exp(-r.uniform(0.8, 2) * z) for j in range(3))
        mu = r.uniform(0.5, 2)
        u = reconstruct_u_b2(Profile1D(zg, f[None, :]), mu).values[0]
        # independent fifth-order check: 5-point central differences
        h = zg.h
        d = (u[:-4] - 8 * u[1:-3] + 8 * u[3:-1] - u[4:]) / (12 * h)
        assert np.max(np.abs(d + f[2:-2] / mu)) <= 1e-8

    def test_integral_commutes_with_dx(self):
        zg = ZGrid(512)
        x = np.arange(16) * LX / 16
        f = (1 + 0.3 * np.sin(2 * x))[:, None] * np.exp(-zg.z)[None, :] * (1 + zg.z)
        a = spectral_dx(tail_integral(f, zg).values, LX)
        b = tail_integral(spectral_dx(f, LX), zg).values
        assert np.max(np.abs(a - b)) <= 1e-10


P = ModelParams(1.0, 1.0, 1.0)


class TestLayer1:
    def test_zero_traces(self):
        h = march(LayerHierarchy(ZGrid(128), 4, P, 1e-2, max_order=3), 5, 1e-2)
        assert all(p.is_zero() for p in h.profiles.values())

    def test_density_profile_is_heat_solution(self):
        zg = ZGrid(512)
        h = LayerHierarchy(zg, 1, P, 2e-4, max_order=1)
        march(h, 1250, 2e-4, eta_1=-1.0)
        assert np.max(np.abs(h.profiles["eta_b1"].values[0]
                             - erfc_flux_solution(-1.0, zg.z, 0.25))) < 5e-5

    def test_shear_stress_reaction(self):
        # t22 + k eta = mu at the wall, no layer-1 forcing: gamma + 1 reaction
        zg = ZGrid(512)
        h = LayerHierarchy(zg, 1, P, 2e-4, max_order=1)
        march(h, 1250, 2e-4, t22_0=1.0, t12_1=1.0)
        ref = duhamel_reaction_solution(1.0, 2.0, zg.z[::16], 0.25)
        assert np.max(np.abs(h.profiles["t12_b1"].values[0, ::16] - ref)) < 5e-5

    def test_pressure_equals_normal_stress(self):
        h = march(LayerHierarchy(ZGrid(128), 8, P, 1e-2, max_order=1), 5, 1e-2,
                  t22_1=np.cos(np.arange(8) * LX / 8), eta_1=0.5)
        assert np.array_equal(h.profiles["p_b1"].values, h.profiles["t22_b1"].values)

    def test_misaligned_traces(self):
        h = LayerHierarchy(ZGrid(128), 2, P, 1e-2)
        with pytest.raises(SolverError) as e:
            h.advance_low(traces(2, 0.5))
        assert e.value.code == "trajectory-misaligned"


def independent(zg, nx, gamma, dt, nsteps, sources):
    """Run one prototype per step with the source built by ``sources(n)``."""
    st_ = PrototypeStepper(zg, nx, gamma, dt)
    for n in range(1, nsteps + 1):
        a, r, g = sources(n)
        st_.step(a, r, g)
    return st_.current


class TestTermIsolation:
    def test_tags_unique(self):
        tags = all_term_tags()
        assert len(tags) == len(set(tags))
        assert all(t.split(":")[0] in LAYER2 + LAYER3 for t in tags)

    def test_layer2_single_term(self):
        """Only 2 k z dyy(u2) eta_b1 in the t22 order-2 source."""
        zg, nx, dt, N = ZGrid(256), 8, 5e-3, 40
        x = np.arange(nx) * LX / nx
        ey, u2yy = -(1 + 0.5 * np.cos(x)), 0.7 * np.sin(x) + 0.2
        h = LayerHierarchy(zg, nx, P, dt, max_order=2, enabled=only("t22_b2:kz*dyy_u20*etab1"))
        march(h, N, dt, eta_1=ey, u2_2=u2yy)
        eta = PrototypeStepper(zg, nx, 0.0, dt)
        t22 = PrototypeStepper(zg, nx, P.gamma, dt)
        for n in range(N):
            e = eta.step(g=-ey).values
            t22.step(r=2 * P.k * zg.z[None, :] * u2yy[:, None] * e)
        assert np.max(np.abs(h.profiles["t22_b2"].values - t22.current.values)) <= 1e-12
        assert np.max(np.abs(h.profiles["t22_b2"].values)) > 1e-3

    def test_layer3_single_term(self):
        """Only -(1/6) z^3 dyyy(u2) dz(t22_b1) in the t22 order-3 source."""
        zg, nx, dt, N = ZGrid(256), 8, 5e-3, 40
        x = np.arange(nx) * LX / nx
        ty, u2y3 = 1 + 0.5 * np.sin(x), 0.4 * np.cos(2 * x) - 0.3
        h = LayerHierarchy(zg, nx, P, dt, max_order=3,
                           enabled=only("t22_b3:z3*dyyy_u20*dz_t22b1"))
        march(h, N, dt, t22_1=ty, u2_3=u2y3)
        t1 = PrototypeStepper(zg, nx, P.gamma, dt)
        t3 = PrototypeStepper(zg, nx, P.gamma, dt)
        for n in range(N):
            dz = t1.step(g=-ty).dz
            t3.step(r=-(zg.z[None, :] ** 3) / 6 * u2y3[:, None] * dz)
        assert np.max(np.abs(h.profiles["t22_b3"].values - t3.current.values)) <= 1e-12
        assert np.max(np.abs(h.profiles["t22_b3"].values)) > 1e-3

    def test_disabling_everything_leaves_homogeneous_flux_problems(self):
        h = LayerHierarchy(ZGrid(128), 4, P, 1e-2, max_order=3, enabled=lambda t: False)
        march(h, 5, 1e-2, u1_1=1.0, u2_2=1.0)
        assert all(h.profiles[n].is_zero() for n in LAYER2 + LAYER3)


@pytest.fixture(scope="module")
def hierarchy():
    zg, nx = ZGrid(256), 8
    x = np.arange(nx) * LX / nx
    given = dict(u1_1=0.5 + 0.3 * np.sin(x), u1_2=0.2 * np.cos(x), u2_2=0.1 * np.sin(2 * x),
                 u2_3=0.1 * np.cos(x), eta_0=1 + 0.1 * np.cos(x), eta_1=0.4 * np.sin(x),
                 t11_0=1.0, t11_1=0.3 * np.cos(x), t12_0=0.2 * np.sin(x),
                 t12_1=0.5 * np.cos(x), t22_0=1.0, t22_1=-0.4 * np.sin(x))
    return march(LayerHierarchy(zg, nx, P, 5e-3), 20, 5e-3, **given)


class TestChains:
    @pytest.mark.parametrize("pair", [("u1_b2", "u2_b3"), ("u1_b3", "u2_b4"), ("u1_b4", "u2_b5")])
    def test_stored_route(self, hierarchy, pair):
        L = hierarchy.profiles
        assert np.max(np.abs(L[pair[0]].values)) > 1e-4
        assert divergence_chain(L[pair[0]], L[pair[1]]) <= 1e-8

    def test_spline_route_converges(self):
        errs = []
        for nz in (256, 512):
            zg = ZGrid(nz)
            x = np.arange(8) * LX / 8
            h = march(LayerHierarchy(zg, 8, P, 5e-3, max_order=1), 20, 5e-3,
                      t12_1=np.cos(x), u1_1=0.5)
            u1 = h.profiles["u1_b2"]
            u2 = tail_integral(Profile1D(zg, spectral_dx(u1.values, LX)))
            errs.append(divergence_chain(u1, u2, route="spline"))
        # the spline derivative is third-order accurate
        assert errs[0] / errs[1] > 6

    def test_unknown_route(self, hierarchy):
        L = hierarchy.profiles
        with pytest.raises(ValueError):
            divergence_chain(L["u1_b2"], L["u2_b3"], route="other")
