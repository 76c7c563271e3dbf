"""Boundary-layer profiles in the stretched variable z = y / sqrt(eps).

Every profile solves a half-line problem

    th_t - th_zz + (gamma0 + a(x, t)) th = r(x, z, t),
    dz th(x, 0, t) = g(x, t),  th(x, z, 0) = 0,

discretized with BDF2 (BDF1 start) in time and second-order differences in z.
The wall flux enters through a one-sided second-order closure row (the plain
ghost-node row is available too); the far end Z carries a homogeneous Neumann
row of the same kind.  x-columns are independent and solved together as a
single banded system.

The hierarchy is marched one time step at a time alongside the outer
solvers because its coefficients are wall traces of the outer solutions.
Source terms are lists of tagged callables so any term can be switched off.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded

from .errors import SolverError
from .grid import ModelParams
from .profiles import Profile1D, ZGrid, spectral_dx

TAIL_TOL = 1e-6


# ---------------------------------------------------------------- cutoff

def cutoff(s, deriv: int = 0):
    """Quintic cutoff: 1 at 0 with vanishing first and second derivatives,
    0 for s >= 1, twice continuously differentiable."""
    s = np.asarray(s, dtype=float)
    t = np.clip(s, 0.0, 1.0)
    inside = (s < 1.0).astype(float)
    if deriv == 0:
        return (1.0 - (10 * t ** 3 - 15 * t ** 4 + 6 * t ** 5)) * inside
    if deriv == 1:
        return -(30 * t ** 2 - 60 * t ** 3 + 30 * t ** 4) * inside
    if deriv == 2:
        return -(60 * t - 180 * t ** 2 + 120 * t ** 3) * inside
    if deriv == 3:
        return -(60 - 360 * t + 360 * t ** 2) * inside
    raise ValueError("cutoff derivatives available up to order 3")


def cutoff_integral(s):
    """int_0^s cutoff."""
    s = np.asarray(s, dtype=float)
    t = np.clip(s, 0.0, 1.0)
    return t - (2.5 * t ** 4 - 3 * t ** 5 + t ** 6)


# ---------------------------------------------------------------- prototype

@dataclass
class PrototypeProblem:
    """Coefficients may be constants, arrays over x, or callables of t."""
    gamma0: float = 0.0
    a: object = 0.0
    r: object = 0.0
    neumann_g: object = 0.0

    def sample(self, t: float, nx: int, nz: int):
        ev = lambda c: c(t) if callable(c) else c
        a = np.broadcast_to(np.asarray(ev(self.a), dtype=float), (nx,))
        g = np.broadcast_to(np.asarray(ev(self.neumann_g), dtype=float), (nx,))
        r = np.broadcast_to(np.asarray(ev(self.r), dtype=float), (nx, nz))
        return a, r, g


# wall rows (coefficients of th_0, th_1, th_2 and of h*g), all divided by h^2
CLOSURES = {
    # ghost node th_{-1} = th_1 - 2 h g: first order locally, second order globally
    "ghost": ((-2.0, 2.0, 0.0), -2.0),
    # one-sided second-order formula for th_zz with th_z(0) = g
    "one-sided": ((-3.5, 4.0, -0.5), -3.0),
}


def wall_laplacian(zgrid: ZGrid, th: np.ndarray, g: np.ndarray,
                   closure: str = "one-sided") -> np.ndarray:
    """th_zz with flux g at z = 0 and zero flux at Z, using the closure rows."""
    (c0, c1, c2), cg = CLOSURES[closure]
    h2 = zgrid.h ** 2
    g = np.asarray(g, dtype=float).reshape(-1)
    out = np.empty_like(th)
    out[:, 1:-1] = (th[:, :-2] - 2 * th[:, 1:-1] + th[:, 2:]) / h2
    out[:, 0] = (c0 * th[:, 0] + c1 * th[:, 1] + c2 * th[:, 2] + cg * zgrid.h * g) / h2
    out[:, -1] = (c0 * th[:, -1] + c1 * th[:, -2] + c2 * th[:, -3]) / h2
    return out


def flux_gradient(zgrid: ZGrid, th: np.ndarray, g: np.ndarray) -> np.ndarray:
    """th_z: central differences inside, the prescribed fluxes at both ends."""
    out = np.empty_like(th)
    out[:, 1:-1] = (th[:, 2:] - th[:, :-2]) / (2 * zgrid.h)
    out[:, 0] = g
    out[:, -1] = 0.0
    return out


class PrototypeStepper:
    """Marches one family of profiles (one per x-column) in time."""

    def __init__(self, zgrid: ZGrid, nx: int, gamma0: float, dt: float, name: str = "",
                 Lx: float = 2 * np.pi, tail_tol: float = TAIL_TOL,
                 closure: str = "one-sided"):
        if gamma0 < 0:
            raise SolverError("invalid-config", "gamma0 must be non-negative")
        if closure not in CLOSURES:
            raise SolverError("invalid-config", f"unknown wall closure {closure!r}")
        self.zgrid, self.nx, self.gamma0, self.dt = zgrid, nx, float(gamma0), float(dt)
        self.name, self.Lx, self.tail_tol, self.closure = name, Lx, tail_tol, closure
        self.current = Profile1D.zeros(zgrid, nx, 0.0, name, Lx)
        self.previous: Profile1D | None = None

    @property
    def time(self) -> float:
        return self.current.time

    def _matrix(self, c: float, a: np.ndarray) -> np.ndarray:
        """Banded storage (2 sub-, 2 super-diagonals) of c + gamma0 + a - d_zz."""
        nx, nz, h2 = self.nx, self.zgrid.nz, self.zgrid.h ** 2
        (c0, c1, c2), _ = CLOSURES[self.closure]
        bands = np.zeros((5, nx, nz))     # offsets +2, +1, 0, -1, -2 of row i
        bands[2] = (c + self.gamma0 + a)[:, None] + 2.0 / h2
        bands[1] = bands[3] = -1.0 / h2
        bands[0] = bands[4] = 0.0
        bands[2, :, 0] = bands[2, :, -1] = (c + self.gamma0 + a) - c0 / h2
        bands[1, :, 0], bands[0, :, 0] = -c1 / h2, -c2 / h2
        bands[3, :, -1], bands[4, :, -1] = -c1 / h2, -c2 / h2
        bands[3, :, 0] = 0.0              # columns stay uncoupled
        bands[1, :, -1] = 0.0
        n = nx * nz
        ab = np.zeros((5, n))
        for row, off in enumerate((2, 1, 0, -1, -2)):
            v = bands[row].ravel()
            # entry (i, i + off) sits in ab[2 - off, i + off]
            if off > 0:
                ab[row, off:] = v[:-off]
            elif off < 0:
                ab[row, :off] = v[-off:]
            else:
                ab[row] = v
        return ab

    def step(self, a=0.0, r=0.0, g=0.0) -> Profile1D:
        nx, nz, dt = self.nx, self.zgrid.nz, self.dt
        a = np.broadcast_to(np.asarray(a, dtype=float).reshape(-1), (nx,))
        g = np.broadcast_to(np.asarray(g, dtype=float).reshape(-1), (nx,))
        r = np.broadcast_to(np.asarray(r, dtype=float), (nx, nz))
        cur = self.current.values
        if self.previous is None:
            c = 1.0 / dt
            rhs = cur / dt + r
        else:
            c = 1.5 / dt
            rhs = (4 * cur - self.previous.values) / (2 * dt) + r
        rhs = rhs.copy()
        rhs[:, 0] += CLOSURES[self.closure][1] * g / self.zgrid.h
        sol = solve_banded((2, 2), self._matrix(c, a), rhs.ravel(),
                           overwrite_ab=True, check_finite=False).reshape(nx, nz)
        if not np.all(np.isfinite(sol)):
            raise SolverError("diverged", f"profile {self.name} at t={self.time + dt:g}")
        scale = max(1.0, float(np.max(np.abs(sol))))
        if np.max(np.abs(sol[:, -1])) > self.tail_tol * scale:
            raise SolverError("layer-box-too-small",
                              f"{self.name}: |profile(Z)| = {np.max(np.abs(sol[:, -1])):.2e}")
        new = Profile1D(self.zgrid, sol, self.time + dt, self.name, self.Lx,
                        dz=flux_gradient(self.zgrid, sol, g),
                        dzz=wall_laplacian(self.zgrid, sol, g, self.closure),
                        flux=np.array(g))
        self.previous, self.current = self.current, new
        return new


def solve_prototype(problem: PrototypeProblem, zgrid: ZGrid, dt: float, nsteps: int,
                    nx: int = 1, Lx: float = 2 * np.pi,
                    tail_tol: float = TAIL_TOL, closure: str = "one-sided") -> list[Profile1D]:
    """Trajectory of the prototype problem at t = dt, 2 dt, ..., nsteps dt."""
    st = PrototypeStepper(zgrid, nx, problem.gamma0, dt, "theta", Lx, tail_tol, closure)
    out = []
    for n in range(1, nsteps + 1):
        a, r, g = problem.sample(n * dt, nx, zgrid.nz)
        out.append(st.step(a, r, g))
    return out


def solve_prototype_lifted(problem: PrototypeProblem, zgrid: ZGrid, dt: float, nsteps: int,
                           nx: int = 1, Lx: float = 2 * np.pi,
                           closure: str = "one-sided") -> list[Profile1D]:
    """Same problem through the lifting th = th~ + z cutoff(z) g: th~ has zero
    wall flux and an extra source equal to minus the discrete operator applied
    to the lifting.  Agrees with :func:`solve_prototype` to round-off."""
    z = zgrid.z
    shape = z * cutoff(z)
    st = PrototypeStepper(zgrid, nx, problem.gamma0, dt, "lifted", Lx, np.inf, closure)
    lift_hist = [np.zeros((nx, zgrid.nz))]
    out = []
    for n in range(1, nsteps + 1):
        a, r, g = problem.sample(n * dt, nx, zgrid.nz)
        lift = g[:, None] * shape[None, :]
        if n == 1:
            dlift = (lift - lift_hist[-1]) / dt
        else:
            dlift = (3 * lift - 4 * lift_hist[-1] + lift_hist[-2]) / (2 * dt)
        op = dlift - wall_laplacian(zgrid, lift, g, closure) + (problem.gamma0 + a)[:, None] * lift
        prof = st.step(a, r - op, 0.0)
        lift_hist.append(lift)
        vals = prof.values + lift
        out.append(Profile1D(zgrid, vals, prof.time, "theta", Lx,
                             dz=flux_gradient(zgrid, vals, g),
                             dzz=wall_laplacian(zgrid, vals, g, closure), flux=g.copy()))
    return out


# ---------------------------------------------------------------- tail integrals

def tail_integral(f: Profile1D | np.ndarray, zgrid: ZGrid | None = None, name: str = "",
                  Lx: float = 2 * np.pi, time: float = 0.0,
                  dfz: np.ndarray | None = None) -> Profile1D:
    """I(z) = int_z^Z f dz' by integrating the not-a-knot cubic spline of f.

    The result carries the exact derivatives dz I = -f and dzz I = -dz f.
    """
    if isinstance(f, Profile1D):
        zgrid, Lx, time = f.zgrid, f.Lx, f.time
        dfz = f.derivative_z(1) if dfz is None else dfz
        f = f.values
    z = zgrid.z
    F = CubicSpline(z, f, axis=1).antiderivative()
    vals = F(zgrid.Z)[:, None] - F(z)
    vals[:, -1] = 0.0
    if dfz is None:
        dfz = np.asarray((zgrid.D1 @ f.T).T)
    return Profile1D(zgrid, vals, time, name, Lx, dz=-f, dzz=-dfz, flux=-f[:, 0].copy())


def reconstruct_u_b2(tau12_b1: Profile1D, mu: float) -> Profile1D:
    """u1 of order 2: (1/mu) int_z^inf tau12 of order 1 (u2 of order 2 is zero)."""
    p = tail_integral(tau12_b1, name="u1_b2")
    return _scaled(p, 1.0 / mu, "u1_b2")


def _scaled(p: Profile1D, c: float, name: str) -> Profile1D:
    return Profile1D(p.zgrid, c * p.values, p.time, name, p.Lx,
                     dz=None if p.dz is None else c * p.dz,
                     dzz=None if p.dzz is None else c * p.dzz,
                     flux=None if p.flux is None else c * p.flux)


def _combine(terms: Iterable[tuple[float, Profile1D]], name: str) -> Profile1D:
    terms = list(terms)
    p0 = terms[0][1]
    vals = sum(c * p.values for c, p in terms)
    dz = sum(c * p.derivative_z(1) for c, p in terms)
    dzz = sum(c * p.derivative_z(2) for c, p in terms)
    return Profile1D(p0.zgrid, vals, p0.time, name, p0.Lx, dz=dz, dzz=dzz)


def _dx_profile(p: Profile1D, name: str) -> Profile1D:
    d = lambda v: None if v is None else spectral_dx(v, p.Lx)
    return Profile1D(p.zgrid, d(p.values), p.time, name, p.Lx, dz=d(p.dz), dzz=d(p.dzz),
                     flux=None if p.flux is None else d(p.flux[:, None])[:, 0])


# ---------------------------------------------------------------- source terms

Term = tuple[str, Callable]


class SourceContext:
    """Everything a source term may read at the new time level."""

    def __init__(self, hierarchy: "LayerHierarchy", tr0, tr2=None):
        self.h = hierarchy
        self.tr0 = tr0
        self.tr2 = tr2
        z = hierarchy.zgrid.z[None, :]
        self.z, self.z2, self.z3 = z, z ** 2, z ** 3
        self.k = hierarchy.params.k
        self.mu = hierarchy.params.mu
        self._dx: dict = {}

    # outer order-0 wall traces, as (nx, 1) columns
    def o(self, name: str, order: int = 0, dx: int = 0) -> np.ndarray:
        return self.tr0.get(name, order, dx)[:, None]

    # outer order-2 wall traces
    def o2(self, name: str, order: int = 0, dx: int = 0) -> np.ndarray:
        if self.tr2 is None:
            raise SolverError("trajectory-misaligned", "order-2 outer traces missing")
        return self.tr2.get(name, order, dx)[:, None]

    def p(self, name: str) -> np.ndarray:
        return self.h.profiles[name].values

    def pz(self, name: str) -> np.ndarray:
        return self.h.profiles[name].derivative_z(1)

    def px(self, name: str, power: int = 1) -> np.ndarray:
        key = (name, power, id(self.h.profiles[name]))
        if key not in self._dx:
            self._dx[key] = spectral_dx(self.h.profiles[name].values, self.h.Lx, power)
        return self._dx[key]

    def wall(self, name: str) -> np.ndarray:
        return self.h.profiles[name].values[:, :1]


def _sum_terms(terms: list[Term], ctx: SourceContext, enabled, shape) -> np.ndarray:
    out = np.zeros(shape)
    for tag, fn in terms:
        if enabled(tag):
            out = out + fn(ctx)
    return out


def eta_b2_terms() -> list[Term]:
    return [
        ("eta_b2:u1b2*dx_eta0", lambda c: -c.p("u1_b2") * c.o("eta", 0, 1)),
        ("eta_b2:z2*dyy_u20*dz_etab1", lambda c: -0.5 * c.z2 * c.o("u2", 2) * c.pz("eta_b1")),
        ("eta_b2:z*dy_u10*dx_etab1", lambda c: -c.z * c.o("u1", 1) * c.px("eta_b1")),
    ]


def t22_b2_terms() -> list[Term]:
    return [
        ("t22_b2:u1b2*dx_t220", lambda c: -c.p("u1_b2") * c.o("t22", 0, 1)),
        ("t22_b2:t220*dx_u1b2", lambda c: 2 * c.o("t22") * c.px("u1_b2")),
        ("t22_b2:eta0*dx_u1b2", lambda c: 2 * c.k * c.o("eta") * c.px("u1_b2")),
        ("t22_b2:z2*dyy_u20*dz_t22b1", lambda c: -0.5 * c.z2 * c.o("u2", 2) * c.pz("t22_b1")),
        ("t22_b2:z*dy_u10*dx_t22b1", lambda c: -c.z * c.o("u1", 1) * c.px("t22_b1")),
        ("t22_b2:z*dyy_u20*t22b1", lambda c: 2 * c.z * c.o("u2", 2) * c.p("t22_b1")),
        ("t22_b2:kz*dyy_u20*etab1", lambda c: 2 * c.k * c.z * c.o("u2", 2) * c.p("eta_b1")),
    ]


def t12_b2_terms() -> list[Term]:
    return [
        ("t12_b2:dy_u10*t22b2", lambda c: c.o("u1", 1) * c.p("t22_b2")),
        ("t12_b2:u1b2*dx_t120", lambda c: -c.p("u1_b2") * c.o("t12", 0, 1)),
        ("t12_b2:t22b1*dz_u1b2", lambda c: c.p("t22_b1") * c.pz("u1_b2")),
        ("t12_b2:k*etab2*dy_u10", lambda c: c.k * c.p("eta_b2") * c.o("u1", 1)),
        ("t12_b2:k*etab1*dz_u1b2", lambda c: c.k * c.p("eta_b1") * c.pz("u1_b2")),
        ("t12_b2:z2*dyy_u20*dz_t12b1", lambda c: -0.5 * c.z2 * c.o("u2", 2) * c.pz("t12_b1")),
        ("t12_b2:z*dy_u10*dx_t12b1", lambda c: -c.z * c.o("u1", 1) * c.px("t12_b1")),
        ("t12_b2:z*dyy_u10*t22b1", lambda c: c.z * c.o("u1", 2) * c.p("t22_b1")),
        ("t12_b2:z*dy_t220*dz_u1b2", lambda c: c.z * c.o("t22", 1) * c.pz("u1_b2")),
        ("t12_b2:kz*dy_eta0*dz_u1b2", lambda c: c.k * c.z * c.o("eta", 1) * c.pz("u1_b2")),
        ("t12_b2:kz*dyy_u10*etab1", lambda c: c.k * c.z * c.o("u1", 2) * c.p("eta_b1")),
        ("t12_b2:coef*J1", lambda c: (c.o("t22") + c.k * c.o("eta")) / c.mu * c.p("J1")),
    ]


def t11_b2_terms() -> list[Term]:
    return [
        ("t11_b2:t120*t12b2", lambda c: -(2 / c.mu) * c.o("t12") * c.p("t12_b2")),
        ("t11_b2:dy_u10*t12b2", lambda c: 2 * c.o("u1", 1) * c.p("t12_b2")),
        ("t11_b2:t120*J1", lambda c: (2 / c.mu) * c.o("t12") * c.p("J1")),
        ("t11_b2:u1b2*dx_t110", lambda c: -c.p("u1_b2") * c.o("t11", 0, 1)),
        ("t11_b2:z2*dyy_u20*dz_t11b1", lambda c: -0.5 * c.z2 * c.o("u2", 2) * c.pz("t11_b1")),
        ("t11_b2:z*dy_u10*dx_t11b1", lambda c: -c.z * c.o("u1", 1) * c.px("t11_b1")),
        ("t11_b2:t110*dx_u1b2", lambda c: 2 * c.o("t11") * c.px("u1_b2")),
        ("t11_b2:t12b1*dz_u1b2", lambda c: 2 * c.p("t12_b1") * c.pz("u1_b2")),
        ("t11_b2:k*eta0*dx_u1b2", lambda c: 2 * c.k * c.o("eta") * c.px("u1_b2")),
        ("t11_b2:z*dxdy_u10*t11b1", lambda c: 2 * c.z * c.o("u1", 1, 1) * c.p("t11_b1")),
        ("t11_b2:z*dyy_u10*t12b1", lambda c: 2 * c.z * c.o("u1", 2) * c.p("t12_b1")),
        ("t11_b2:z*dy_t120*dz_u1b2", lambda c: 2 * c.z * c.o("t12", 1) * c.pz("u1_b2")),
        ("t11_b2:kz*dxdy_u10*etab1", lambda c: 2 * c.k * c.z * c.o("u1", 1, 1) * c.p("eta_b1")),
    ]


# wall values of the order-2/3 outer velocity follow from their Dirichlet data
def _u1_i2(c):
    return c.o2("u1")


def _u2_i3(c):
    return -c.wall("u2_b3")


def eta_b3_terms() -> list[Term]:
    return [
        ("eta_b3:u1b3*dx_eta0", lambda c: -c.p("u1_b3") * c.o("eta", 0, 1)),
        ("eta_b3:u2b3*dy_eta0", lambda c: -c.p("u2_b3") * c.o("eta", 1)),
        ("eta_b3:dxx_etab1", lambda c: c.px("eta_b1", 2)),
        ("eta_b3:(u1i2+u1b2)*dx_etab1", lambda c: -(_u1_i2(c) + c.p("u1_b2")) * c.px("eta_b1")),
        ("eta_b3:(u2i3+u2b3)*dz_etab1", lambda c: -(_u2_i3(c) + c.p("u2_b3")) * c.pz("eta_b1")),
        ("eta_b3:z3*dyyy_u20*dz_etab1", lambda c: -c.z3 / 6 * c.o("u2", 3) * c.pz("eta_b1")),
        ("eta_b3:z2*dyy_u10*dx_etab1", lambda c: -0.5 * c.z2 * c.o("u1", 2) * c.px("eta_b1")),
        ("eta_b3:z2*dyy_u20*dz_etab2", lambda c: -0.5 * c.z2 * c.o("u2", 2) * c.pz("eta_b2")),
        ("eta_b3:z*dxdy_eta0*u1b2", lambda c: -c.z * c.o("eta", 1, 1) * c.p("u1_b2")),
        ("eta_b3:z*dy_u10*dx_etab2", lambda c: -c.z * c.o("u1", 1) * c.px("eta_b2")),
        ("eta_b3:z*dy_u2i2*dz_etab1", lambda c: -c.z * c.o2("u2", 1) * c.pz("eta_b1")),
    ]


def t22_b3_terms() -> list[Term]:
    return [
        ("t22_b3:dxx_t22b1", lambda c: c.px("t22_b1", 2)),
        ("t22_b3:(eta0+t220)*dx_u1b3",
         lambda c: -2 * (c.k * c.o("eta") + c.o("t22")) * c.px("u1_b3")),
        ("t22_b3:u1b2*dx_t22b1", lambda c: -c.p("u1_b2") * c.px("t22_b1")),
        ("t22_b3:u2b3*dz_t22b1", lambda c: -c.p("u2_b3") * c.pz("t22_b1")),
        ("t22_b3:u1i2*dx_t22b1", lambda c: -_u1_i2(c) * c.px("t22_b1")),
        ("t22_b3:u2i3*dz_t22b1", lambda c: -_u2_i3(c) * c.pz("t22_b1")),
        ("t22_b3:u1b3*dx_t220", lambda c: -c.p("u1_b3") * c.o("t22", 0, 1)),
        ("t22_b3:u2b3*dy_t220", lambda c: -c.p("u2_b3") * c.o("t22", 1)),
        ("t22_b3:t120*dx_u2b3", lambda c: 2 * c.o("t12") * c.px("u2_b3")),
        ("t22_b3:t22b1*dy_u2i2", lambda c: 2 * c.p("t22_b1") * c.o2("u2", 1)),
        ("t22_b3:t22b1*dz_u2b3", lambda c: 2 * c.p("t22_b1") * c.pz("u2_b3")),
        ("t22_b3:k*etab1*dy_u2i2", lambda c: 2 * c.k * c.p("eta_b1") * c.o2("u2", 1)),
        ("t22_b3:k*etab1*dz_u2b3", lambda c: 2 * c.k * c.p("eta_b1") * c.pz("u2_b3")),
        ("t22_b3:z2*dxdyy_u20*t12b1", lambda c: c.z2 * c.o("u2", 2, 1) * c.p("t12_b1")),
        ("t22_b3:z2*dyyy_u20*t22b1", lambda c: c.z2 * c.o("u2", 3) * c.p("t22_b1")),
        ("t22_b3:kz2*dyyy_u20*etab1", lambda c: c.k * c.z2 * c.o("u2", 3) * c.p("eta_b1")),
        ("t22_b3:z*dyy_u20*t22b2", lambda c: 2 * c.z * c.o("u2", 2) * c.p("t22_b2")),
        ("t22_b3:z*dy_t220*dz_u2b3", lambda c: 2 * c.z * c.o("t22", 1) * c.pz("u2_b3")),
        ("t22_b3:kz*dyy_u20*etab2", lambda c: 2 * c.k * c.z * c.o("u2", 2) * c.p("eta_b2")),
        ("t22_b3:kz*dy_eta0*dz_u2b3", lambda c: 2 * c.k * c.z * c.o("eta", 1) * c.pz("u2_b3")),
        ("t22_b3:z*dxdy_t220*u1b2", lambda c: -c.z * c.o("t22", 1, 1) * c.p("u1_b2")),
        ("t22_b3:z*dy_u10*dx_t22b2", lambda c: -c.z * c.o("u1", 1) * c.px("t22_b2")),
        ("t22_b3:z*dy_u2i2*dz_t22b1", lambda c: -c.z * c.o2("u2", 1) * c.pz("t22_b1")),
        ("t22_b3:z3*dyyy_u20*dz_t22b1", lambda c: -c.z3 / 6 * c.o("u2", 3) * c.pz("t22_b1")),
        ("t22_b3:z2*dyy_u10*dx_t22b1", lambda c: -0.5 * c.z2 * c.o("u1", 2) * c.px("t22_b1")),
        ("t22_b3:z2*dyy_u20*dz_t22b2", lambda c: -0.5 * c.z2 * c.o("u2", 2) * c.pz("t22_b2")),
    ]


def t12_b3_terms() -> list[Term]:
    return [
        ("t12_b3:dxx_t12b1", lambda c: c.px("t12_b1", 2)),
        ("t12_b3:u1b3*dx_t120", lambda c: -c.p("u1_b3") * c.o("t12", 0, 1)),
        ("t12_b3:u2b3*dy_t120", lambda c: -c.p("u2_b3") * c.o("t12", 1)),
        ("t12_b3:u1i2*dx_t12b1", lambda c: -_u1_i2(c) * c.px("t12_b1")),
        ("t12_b3:u1b2*dx_t12b1", lambda c: -c.p("u1_b2") * c.px("t12_b1")),
        ("t12_b3:u2b3*dz_t12b1", lambda c: -c.p("u2_b3") * c.pz("t12_b1")),
        ("t12_b3:u2i3*dz_t12b1", lambda c: -_u2_i3(c) * c.pz("t12_b1")),
        ("t12_b3:t110*dx_u2b3", lambda c: c.o("t11") * c.px("u2_b3")),
        ("t12_b3:t22b1*dy_u1i2", lambda c: c.p("t22_b1") * c.o2("u1", 1)),
        ("t12_b3:t22b3*dy_u10", lambda c: c.p("t22_b3") * c.o("u1", 1)),
        ("t12_b3:t22b1*dz_u1b3", lambda c: c.p("t22_b1") * c.pz("u1_b3")),
        ("t12_b3:t22i2*dz_u1b2", lambda c: c.o2("t22") * c.pz("u1_b2")),
        ("t12_b3:t22b2*dz_u1b2", lambda c: c.p("t22_b2") * c.pz("u1_b2")),
        ("t12_b3:k*eta0*dx_u2b3", lambda c: c.k * c.o("eta") * c.px("u2_b3")),
        ("t12_b3:k*etab1*dz_u1b3", lambda c: c.k * c.p("eta_b1") * c.pz("u1_b3")),
        ("t12_b3:k*etab2*dz_u1b2", lambda c: c.k * c.p("eta_b2") * c.pz("u1_b2")),
        ("t12_b3:k*etab1*dy_u1i2", lambda c: c.k * c.p("eta_b1") * c.o2("u1", 1)),
        ("t12_b3:k*etab3*dy_u10", lambda c: c.k * c.p("eta_b3") * c.o("u1", 1)),
        ("t12_b3:k*etai2*dz_u1b2", lambda c: c.k * c.o2("eta") * c.pz("u1_b2")),
        ("t12_b3:z*dxdy_t120*u1b2", lambda c: -c.z * c.o("t12", 1, 1) * c.p("u1_b2")),
        ("t12_b3:z*dy_u10*dx_t12b2", lambda c: -c.z * c.o("u1", 1) * c.px("t12_b2")),
        ("t12_b3:z*dy_u2i2*dz_t12b1", lambda c: -c.z * c.o2("u2", 1) * c.pz("t12_b1")),
        ("t12_b3:z*dyy_u10*(t22b2+k*etab2)",
         lambda c: c.z * c.o("u1", 2) * (c.p("t22_b2") + c.k * c.p("eta_b2"))),
        ("t12_b3:z*(dy_t220+k*dy_eta0)*dz_u1b3",
         lambda c: c.z * (c.o("t22", 1) + c.k * c.o("eta", 1)) * c.pz("u1_b3")),
        ("t12_b3:z3*dyyy_u20*dz_t12b1", lambda c: -c.z3 / 6 * c.o("u2", 3) * c.pz("t12_b1")),
        ("t12_b3:z2*dyy_u10*dx_t12b1", lambda c: -0.5 * c.z2 * c.o("u1", 2) * c.px("t12_b1")),
        ("t12_b3:z2*dyy_u20*dz_t12b2", lambda c: -0.5 * c.z2 * c.o("u2", 2) * c.pz("t12_b2")),
        ("t12_b3:z2*dxdyy_u20*t11b1", lambda c: 0.5 * c.z2 * c.o("u2", 2, 1) * c.p("t11_b1")),
        ("t12_b3:z2*dyyy_u10*t22b1", lambda c: 0.5 * c.z2 * c.o("u1", 3) * c.p("t22_b1")),
        ("t12_b3:z2*dyy_t220*dz_u1b2", lambda c: 0.5 * c.z2 * c.o("t22", 2) * c.pz("u1_b2")),
        ("t12_b3:kz2*dxdyy_u20*etab1",
         lambda c: 0.5 * c.k * c.z2 * c.o("u2", 2, 1) * c.p("eta_b1")),
        ("t12_b3:kz2*dyyy_u10*etab1", lambda c: 0.5 * c.k * c.z2 * c.o("u1", 3) * c.p("eta_b1")),
        ("t12_b3:kz2*dyy_eta0*dz_u1b2",
         lambda c: 0.5 * c.k * c.z2 * c.o("eta", 2) * c.pz("u1_b2")),
        ("t12_b3:coef*K2", lambda c: (c.o("t22") + c.k * c.o("eta")) / c.mu * c.p("K2")),
    ]


def t11_b3_terms() -> list[Term]:
    return [
        ("t11_b3:dxx_t11b1", lambda c: c.px("t11_b1", 2)),
        ("t11_b3:u1b3*dx_t110", lambda c: -c.p("u1_b3") * c.o("t11", 0, 1)),
        ("t11_b3:u2b3*dy_t110", lambda c: -c.p("u2_b3") * c.o("t11", 1)),
        ("t11_b3:u1i2*dx_t11b1", lambda c: -_u1_i2(c) * c.px("t11_b1")),
        ("t11_b3:u1b2*dx_t11b1", lambda c: -c.p("u1_b2") * c.px("t11_b1")),
        ("t11_b3:u2i3*dz_t11b1", lambda c: -_u2_i3(c) * c.pz("t11_b1")),
        ("t11_b3:u2b3*dz_t11b1", lambda c: -c.p("u2_b3") * c.pz("t11_b1")),
        ("t11_b3:t110*dx_u1b3", lambda c: 2 * c.o("t11") * c.px("u1_b3")),
        ("t11_b3:t11b1*dx_u1b2", lambda c: 2 * c.p("t11_b1") * c.px("u1_b2")),
        ("t11_b3:t11b1*dx_u1i2", lambda c: 2 * c.p("t11_b1") * c.o2("u1", 0, 1)),
        ("t11_b3:t12b1*dy_u1i2", lambda c: 2 * c.p("t12_b1") * c.o2("u1", 1)),
        ("t11_b3:t12b3*dy_u10", lambda c: 2 * c.p("t12_b3") * c.o("u1", 1)),
        ("t11_b3:t120*t12b3", lambda c: -(2 / c.mu) * c.o("t12") * c.p("t12_b3")),
        ("t11_b3:t12b1*dz_u1b3", lambda c: 2 * c.p("t12_b1") * c.pz("u1_b3")),
        ("t11_b3:t12i2*dz_u1b2", lambda c: 2 * c.o2("t12") * c.pz("u1_b2")),
        ("t11_b3:t12b2*dz_u1b2", lambda c: 2 * c.p("t12_b2") * c.pz("u1_b2")),
        ("t11_b3:k*eta0*dx_u1b3", lambda c: 2 * c.k * c.o("eta") * c.px("u1_b3")),
        ("t11_b3:k*etab1*dx_u1b2", lambda c: 2 * c.k * c.p("eta_b1") * c.px("u1_b2")),
        ("t11_b3:k*dx_u1i2*etab1", lambda c: 2 * c.k * c.o2("u1", 0, 1) * c.p("eta_b1")),
        ("t11_b3:z*dxdy_t110*u1b2", lambda c: -c.z * c.o("t11", 1, 1) * c.p("u1_b2")),
        ("t11_b3:z*dy_u10*dx_t11b2", lambda c: -c.z * c.o("u1", 1) * c.px("t11_b2")),
        ("t11_b3:z*dy_u2i2*dz_t11b1", lambda c: -c.z * c.o2("u2", 1) * c.pz("t11_b1")),
        ("t11_b3:z*dy_t110*dx_u1b2", lambda c: 2 * c.z * c.o("t11", 1) * c.px("u1_b2")),
        ("t11_b3:z*dxdy_u10*t11b2", lambda c: 2 * c.z * c.o("u1", 1, 1) * c.p("t11_b2")),
        ("t11_b3:z*dyy_u10*t12b2", lambda c: 2 * c.z * c.o("u1", 2) * c.p("t12_b2")),
        ("t11_b3:z*dy_t120*dz_u1b3", lambda c: 2 * c.z * c.o("t12", 1) * c.pz("u1_b3")),
        ("t11_b3:kz*dy_eta0*dx_u1b2", lambda c: 2 * c.k * c.z * c.o("eta", 1) * c.px("u1_b2")),
        ("t11_b3:kz*dxdy_u10*etab2", lambda c: 2 * c.k * c.z * c.o("u1", 1, 1) * c.p("eta_b2")),
        ("t11_b3:z2*dxdyy_u10*t11b1", lambda c: c.z2 * c.o("u1", 2, 1) * c.p("t11_b1")),
        ("t11_b3:z2*dyyy_u10*t12b1", lambda c: c.z2 * c.o("u1", 3) * c.p("t12_b1")),
        ("t11_b3:z2*dyy_t120*dz_u1b2", lambda c: c.z2 * c.o("t12", 2) * c.pz("u1_b2")),
        ("t11_b3:kz2*dxdyy_u10*etab1", lambda c: c.k * c.z2 * c.o("u1", 2, 1) * c.p("eta_b1")),
        ("t11_b3:z3*dyyy_u20*dz_t11b1", lambda c: -c.z3 / 6 * c.o("u2", 3) * c.pz("t11_b1")),
        ("t11_b3:z2*dyy_u10*dx_t11b1", lambda c: -0.5 * c.z2 * c.o("u1", 2) * c.px("t11_b1")),
        ("t11_b3:z2*dyy_u20*dz_t11b2", lambda c: -0.5 * c.z2 * c.o("u2", 2) * c.pz("t11_b2")),
        ("t11_b3:t120*K2", lambda c: (2 / c.mu) * c.o("t12") * c.p("K2")),
    ]


SOURCE_TABLES = {
    "eta_b2": eta_b2_terms, "t22_b2": t22_b2_terms, "t12_b2": t12_b2_terms,
    "t11_b2": t11_b2_terms, "eta_b3": eta_b3_terms, "t22_b3": t22_b3_terms,
    "t12_b3": t12_b3_terms, "t11_b3": t11_b3_terms,
}


def all_term_tags() -> list[str]:
    return [tag for f in SOURCE_TABLES.values() for tag, _ in f()]


# ---------------------------------------------------------------- the hierarchy

LAYER1 = ("eta_b1", "t22_b1", "t12_b1", "t11_b1")
LAYER2 = ("eta_b2", "t22_b2", "t12_b2", "t11_b2")
LAYER3 = ("eta_b3", "t22_b3", "t12_b3", "t11_b3")


class LayerHierarchy:
    """Profiles of orders 1 to 3, advanced in lockstep with the outer solvers.

    ``enabled`` decides per source-term tag whether the term is included
    (default: all).  ``max_order`` stops the march after the given layer.
    """

    def __init__(self, zgrid: ZGrid, nx: int, params: ModelParams, dt: float,
                 Lx: float = 2 * np.pi, max_order: int = 3,
                 enabled: Callable[[str], bool] | Mapping[str, bool] | None = None,
                 tail_tol: float = TAIL_TOL):
        self.zgrid, self.nx, self.params, self.dt, self.Lx = zgrid, nx, params, dt, Lx
        self.max_order = max_order
        if enabled is None:
            self.enabled = lambda tag: True
        elif callable(enabled):
            self.enabled = enabled
        else:
            flags = dict(enabled)
            self.enabled = lambda tag: flags.get(tag, True)
        gamma = params.gamma
        names = LAYER1 + (LAYER2 if max_order >= 2 else ()) + (LAYER3 if max_order >= 3 else ())
        self.steppers = {n: PrototypeStepper(zgrid, nx, 0.0 if n.startswith("eta") else gamma,
                                             dt, n, Lx, tail_tol) for n in names}
        zero = lambda n: Profile1D.zeros(zgrid, nx, 0.0, n, Lx)
        self.profiles: dict[str, Profile1D] = {n: zero(n) for n in names}
        for n in ("u1_b2", "J1", "u1_b3", "u2_b3", "p_b1", "p_b2", "K2", "u1_b4",
                  "u2_b4", "u2_b5", "p_b3", "dt_u1_b2"):
            self.profiles[n] = zero(n)
        self._u1_b2_hist: list[np.ndarray] = [np.zeros((nx, zgrid.nz))]
        self.time = 0.0

    # ---- layer 1
    def _layer1(self, tr0) -> None:
        mu, k = self.params.mu, self.params.k
        P = self.profiles
        P["eta_b1"] = self.steppers["eta_b1"].step(g=-tr0.get("eta", 1))
        P["t22_b1"] = self.steppers["t22_b1"].step(g=-tr0.get("t22", 1))
        dyu1 = tr0.get("u1", 1)[:, None]
        a12 = (tr0.get("t22") + k * tr0.get("eta")) / mu
        r12 = dyu1 * P["t22_b1"].values + k * P["eta_b1"].values * dyu1
        P["t12_b1"] = self.steppers["t12_b1"].step(a=a12, r=r12, g=-tr0.get("t12", 1))
        r11 = (2 * dyu1 - (2 / mu) * tr0.get("t12")[:, None]) * P["t12_b1"].values
        P["t11_b1"] = self.steppers["t11_b1"].step(r=r11, g=-tr0.get("t11", 1))
        P["p_b1"] = Profile1D(self.zgrid, P["t22_b1"].values, P["t22_b1"].time, "p_b1",
                              self.Lx, dz=P["t22_b1"].dz, dzz=P["t22_b1"].dzz)
        P["u1_b2"] = reconstruct_u_b2(P["t12_b1"], mu)

    # ---- layer 2
    def _layer2(self, tr0) -> None:
        mu, k = self.params.mu, self.params.k
        P = self.profiles
        ctx = SourceContext(self, tr0)
        shape = (self.nx, self.zgrid.nz)
        d11 = _dx_profile(P["t11_b1"], "dx_t11_b1")
        d22 = _dx_profile(P["t22_b1"], "dx_t22_b1")
        P["J1"] = tail_integral(_combine([(1.0, d11), (-1.0, d22)], "J1_integrand"), name="J1")
        P["t22_b2"] = self.steppers["t22_b2"].step(
            r=_sum_terms(t22_b2_terms(), ctx, self.enabled, shape))
        P["eta_b2"] = self.steppers["eta_b2"].step(
            r=_sum_terms(eta_b2_terms(), ctx, self.enabled, shape))
        a12 = (tr0.get("t22") + k * tr0.get("eta")) / mu
        P["t12_b2"] = self.steppers["t12_b2"].step(
            a=a12, r=_sum_terms(t12_b2_terms(), ctx, self.enabled, shape))
        P["t11_b2"] = self.steppers["t11_b2"].step(
            r=_sum_terms(t11_b2_terms(), ctx, self.enabled, shape))
        # reconstructions
        I12 = tail_integral(P["t12_b2"])
        IJ = tail_integral(P["J1"])
        P["u1_b3"] = _combine([(1 / mu, I12), (-1 / mu, IJ)], "u1_b3")
        P["u2_b3"] = tail_integral(_dx_profile(P["u1_b2"], "dx_u1_b2"), name="u2_b3")
        Ix12 = tail_integral(_dx_profile(P["t12_b1"], "dx_t12_b1"))
        P["p_b2"] = _combine([(-mu, _dx_profile(P["u1_b2"], "")), (-1.0, Ix12),
                              (1.0, P["t22_b2"])], "p_b2")
        # time derivative of u1_b2 for the order-3 reconstructions
        hist = self._u1_b2_hist
        u = P["u1_b2"].values
        if len(hist) == 1:
            dtu = (u - hist[-1]) / self.dt
        else:
            dtu = (3 * u - 4 * hist[-1] + hist[-2]) / (2 * self.dt)
        hist.append(u.copy())
        if len(hist) > 3:
            hist.pop(0)
        P["dt_u1_b2"] = Profile1D(self.zgrid, dtu, P["u1_b2"].time, "dt_u1_b2", self.Lx)

    # ---- layer 3
    def _layer3(self, tr0, tr2) -> None:
        mu, k = self.params.mu, self.params.k
        P = self.profiles
        ctx = SourceContext(self, tr0, tr2)
        shape = (self.nx, self.zgrid.nz)
        # K2 = int_z^inf (mu dxx u1_b2 + dx t11_b2 - dt u1_b2 - dx p_b2)
        integrand = (mu * spectral_dx(P["u1_b2"].values, self.Lx, 2)
                     + spectral_dx(P["t11_b2"].values, self.Lx)
                     - P["dt_u1_b2"].values - spectral_dx(P["p_b2"].values, self.Lx))
        P["K2"] = tail_integral(integrand, self.zgrid, "K2", self.Lx, P["u1_b2"].time)
        P["eta_b3"] = self.steppers["eta_b3"].step(
            r=_sum_terms(eta_b3_terms(), ctx, self.enabled, shape), g=-tr2.get("eta", 1))
        P["t22_b3"] = self.steppers["t22_b3"].step(
            r=_sum_terms(t22_b3_terms(), ctx, self.enabled, shape), g=-tr2.get("t22", 1))
        a12 = (tr0.get("t22") + k * tr0.get("eta")) / mu
        P["t12_b3"] = self.steppers["t12_b3"].step(
            a=a12, r=_sum_terms(t12_b3_terms(), ctx, self.enabled, shape), g=-tr2.get("t12", 1))
        P["t11_b3"] = self.steppers["t11_b3"].step(
            r=_sum_terms(t11_b3_terms(), ctx, self.enabled, shape), g=-tr2.get("t11", 1))
        I12 = tail_integral(P["t12_b3"])
        IK = tail_integral(P["K2"])
        P["u1_b4"] = _combine([(1 / mu, I12), (-1 / mu, IK)], "u1_b4")
        P["u2_b4"] = tail_integral(_dx_profile(P["u1_b3"], ""), name="u2_b4")
        P["u2_b5"] = tail_integral(_dx_profile(P["u1_b4"], ""), name="u2_b5")
        Ix12 = tail_integral(_dx_profile(P["t12_b2"], ""))
        P["p_b3"] = _combine([(1.0, P["t22_b3"]), (-mu, _dx_profile(P["u1_b3"], "")),
                              (-1.0, Ix12)], "p_b3")

    def advance_low(self, tr0) -> None:
        """Orders 1 and 2 at the new time level (need order-0 traces only)."""
        t = self.time + self.dt
        if abs(tr0.time - t) > 1e-9 * max(1.0, self.dt):
            raise SolverError("trajectory-misaligned",
                              f"layer step to t={t:g} got traces at t={tr0.time:g}")
        self._layer1(tr0)
        if self.max_order >= 2:
            self._layer2(tr0)
        self.time = t

    def advance_high(self, tr0, tr2) -> None:
        """Order 3 at the current time level (needs order-2 outer traces)."""
        if self.max_order < 3:
            return
        if abs(tr2.time - self.time) > 1e-9 * max(1.0, self.dt):
            raise SolverError("trajectory-misaligned",
                              f"order-3 layer at t={self.time:g} got traces at t={tr2.time:g}")
        self._layer3(tr0, tr2)

    # wall data for the order-2 and order-3 outer systems
    def wall_u_b2(self) -> tuple[np.ndarray, np.ndarray]:
        return -self.profiles["u1_b2"].values[:, 0], np.zeros(self.nx)

    def wall_u_b3(self) -> tuple[np.ndarray, np.ndarray]:
        return -self.profiles["u1_b3"].values[:, 0], -self.profiles["u2_b3"].values[:, 0]

    def snapshot(self) -> dict[str, Profile1D]:
        return dict(self.profiles)


def divergence_chain(u1: Profile1D, u2_next: Profile1D, route: str = "stored") -> float:
    """max |dx u1_j + dz u2_{j+1}|.

    ``route="spline"`` differentiates a fresh cubic spline through the stored
    values of u2_{j+1}, independent of how they were produced; ``"stored"``
    uses the derivative carried by the profile.
    """
    if route == "stored":
        dz = u2_next.derivative_z(1)
    elif route == "spline":
        dz = CubicSpline(u2_next.zgrid.z, u2_next.values, axis=1)(u2_next.zgrid.z, 1)
    else:
        raise ValueError(f"unknown route {route!r}")
    return float(np.max(np.abs(u1.derivative_x() + dz)))
