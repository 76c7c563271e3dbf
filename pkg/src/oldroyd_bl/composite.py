"""Approximate solution built from outer and boundary-layer profiles.

The composite is assembled termwise: every summand carries its own y and yy
derivatives (finite differences for outer fields, the profiles' own
z-derivatives rescaled by powers of eps**-1/2 for layer terms, closed forms
for the cutoff corrector).  The residual of the diffusive system is then
evaluated from these derivatives instead of differentiating a field with an
eps-thin layer on the strip grid.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import CubicSpline

from .errors import SolverError
from .grid import (Field2D, ModelParams, StressField, StripGrid, VelocityField,
                   b_terms, q_terms)
from .layer import LayerHierarchy, cutoff, cutoff_integral, tail_integral
from .outer import (LinearizedOuterState, OuterState, second_order_sources, step_limit,
                    step_linearized, trace_sample)
from .profiles import Profile1D, ZGrid, spectral_dx

QUANTITIES = ("u1", "u2", "p", "eta", "t11", "t12", "t22")
FIDELITIES = ("order2", "order3")


# ---------------------------------------------------------------- lockstep driver

@dataclass
class AsymptoticSnapshot:
    """Outer solutions of orders 0, 2, 3 and all layer profiles at one time."""
    time: float
    steps: int
    I0: OuterState
    I2: OuterState
    I3: OuterState
    layers: dict


class AsymptoticRun:
    """Marches the order-0 limit system, the layer hierarchy and the
    linearized order-2/3 outer systems together, one step at a time.

    Per step: I0 -> wall traces -> layers 1, 2 -> I2 (wall data from layer 2)
    -> layer 3 (needs I2 traces) -> I3 (wall data from layer 3).
    """

    def __init__(self, initial: OuterState, params: ModelParams, dt: float,
                 zgrid: ZGrid | None = None, max_order: int = 3, enabled=None):
        grid = initial.grid
        self.params = params.with_eps(0.0)
        self.dt = dt
        self.max_order = max_order
        self.I0 = initial
        self.I2 = LinearizedOuterState.zeros(grid, order=2)
        self.I3 = LinearizedOuterState.zeros(grid, order=3)
        self.layers = LayerHierarchy(zgrid or ZGrid(), grid.nx, self.params, dt, grid.Lx,
                                     max_order=max_order, enabled=enabled)

    @property
    def time(self) -> float:
        return self.I0.time

    def snapshot(self) -> AsymptoticSnapshot:
        return AsymptoticSnapshot(self.I0.time, self.I0.steps, self.I0, self.I2, self.I3,
                                  self.layers.snapshot())

    def step(self) -> AsymptoticSnapshot:
        P, dt, H = self.params, self.dt, self.layers
        I0n = step_limit(self.I0, P, dt)
        tr0 = trace_sample(I0n)
        H.advance_low(tr0)
        if self.max_order >= 2:
            I2n = step_linearized(self.I2, self.I0, I0n, P, dt, H.wall_u_b2(),
                                  second_order_sources(I0n))
            if self.max_order >= 3:
                H.advance_high(tr0, trace_sample(I2n, 1))
                self.I3 = step_linearized(self.I3, self.I0, I0n, P, dt, H.wall_u_b3())
            self.I2 = I2n
        self.I0 = I0n
        return self.snapshot()

    def run(self, nsteps: int, every: int = 1,
            callback: Callable[[AsymptoticSnapshot], None] | None = None) -> list:
        """Advance ``nsteps``; keep (and pass to ``callback``) every
        ``every``-th snapshot."""
        kept = []
        for n in range(1, nsteps + 1):
            snap = self.step()
            if callback is not None:
                callback(snap)
            if n % every == 0:
                kept.append(snap)
        return kept


# ---------------------------------------------------------------- resampling

def _resample(zgrid: ZGrid, data: np.ndarray, y: np.ndarray, eps: float) -> np.ndarray:
    """data(x, y / sqrt(eps)) by cubic splines in z, zero beyond the box."""
    zq = y / np.sqrt(eps)
    inside = zq <= zgrid.Z * (1 + 1e-14)
    out = np.zeros((data.shape[0], y.size))
    if np.any(inside):
        out[:, inside] = CubicSpline(zgrid.z, data, axis=1)(np.minimum(zq[inside], zgrid.Z))
    return out


def stretch_profile(p: Profile1D, y: np.ndarray, eps: float) -> tuple[np.ndarray, ...]:
    """(f, dy f, dyy f) of f(x, y/sqrt(eps)) on the nodes ``y``."""
    s = np.sqrt(eps)
    zg = p.zgrid
    return (_resample(zg, p.values, y, eps),
            _resample(zg, p.derivative_z(1), y, eps) / s,
            _resample(zg, p.derivative_z(2), y, eps) / eps)


# ---------------------------------------------------------------- corrector w

@dataclass
class CorrectorW:
    w1: Field2D
    w2: Field2D
    dy: tuple[np.ndarray, np.ndarray]
    dyy: tuple[np.ndarray, np.ndarray]


def corrector_w(layers: Mapping[str, Profile1D], grid: StripGrid, eps: float,
                time: float = 0.0) -> CorrectorW:
    """Divergence-free lifting that removes the O(eps^2) wall mismatch left by
    the order-3 and order-4 layer velocities."""
    y = grid.y
    ph = [cutoff(y, d) for d in range(4)]
    Ph = cutoff_integral(y)
    A = tail_integral(layers["u1_b3"]).values[:, 0]      # int_0^inf u1_b3
    C = tail_integral(layers["u1_b4"]).values[:, 0]      # int_0^inf u1_b4
    b = layers["u1_b4"].values[:, 0]
    ax = layers["u2_b4"].values[:, 0]                    # int_0^inf dx u1_b3
    cx = layers["u2_b5"].values[:, 0]                    # int_0^inf dx u1_b4
    bx = spectral_dx(b, grid.Lx)
    s = np.sqrt(eps)
    o = np.outer
    # shape functions in y and their first two derivatives
    S1 = (ph[1], ph[2], ph[3])                                        # phi'
    S2 = (ph[0] ** 2 + ph[1] * Ph,                                    # phi^2 + phi' Phi
          3 * ph[0] * ph[1] + ph[2] * Ph,
          ph[3] * Ph + 4 * ph[0] * ph[2] + 3 * ph[1] ** 2)
    S3 = (ph[0], ph[1], ph[2])                                        # phi
    S4 = (ph[0] * Ph, ph[1] * Ph + ph[0] ** 2, ph[2] * Ph + 3 * ph[0] * ph[1])  # phi Phi
    w1 = [o(A + s * C, S1[d]) - o(b, S2[d]) for d in range(3)]
    w2 = [-o(ax + s * cx, S3[d]) + o(bx, S4[d]) for d in range(3)]
    return CorrectorW(Field2D(grid, w1[0], "w1", time), Field2D(grid, w2[0], "w2", time),
                      (w1[1], w2[1]), (w1[2], w2[2]))


# ---------------------------------------------------------------- composite

@dataclass
class CompositeSolution:
    eps: float
    time: float
    grid: StripGrid
    values: dict
    dy: dict
    dyy: dict
    ledger: tuple
    fidelity: str = "order3"

    @property
    def ua(self) -> VelocityField:
        f = lambda n: Field2D(self.grid, self.values[n], n, self.time)
        return VelocityField(f("u1"), f("u2"))

    @property
    def pa(self) -> Field2D:
        return Field2D(self.grid, self.values["p"], "p", self.time)

    @property
    def etaa(self) -> Field2D:
        return Field2D(self.grid, self.values["eta"], "eta", self.time)

    @property
    def taua(self) -> StressField:
        f = lambda n: Field2D(self.grid, self.values[n], n, self.time)
        return StressField(f("t11"), f("t12"), f("t22"))

    def divergence(self) -> np.ndarray:
        return self.grid.dx(self.values["u1"]) + self.dy["u2"]

    def wall_velocity(self) -> float:
        return float(max(np.max(np.abs(self.values["u1"][:, 0])),
                         np.max(np.abs(self.values["u2"][:, 0]))))


_LAYER_TERMS = {
    # quantity: [(profile, power of sqrt(eps) multiplying it, minimum fidelity)]
    "u1": [("u1_b2", 2, 2), ("u1_b3", 3, 2), ("u1_b4", 4, 3)],
    "u2": [("u2_b3", 3, 2), ("u2_b4", 4, 3), ("u2_b5", 5, 3)],
    "p": [("p_b1", 1, 2), ("p_b2", 2, 2), ("p_b3", 3, 3)],
    "eta": [("eta_b1", 1, 2), ("eta_b2", 2, 2), ("eta_b3", 3, 3)],
    "t11": [("t11_b1", 1, 2), ("t11_b2", 2, 2), ("t11_b3", 3, 3)],
    "t12": [("t12_b1", 1, 2), ("t12_b2", 2, 2), ("t12_b3", 3, 3)],
    "t22": [("t22_b1", 1, 2), ("t22_b2", 2, 2), ("t22_b3", 3, 3)],
}


def _outer_arrays(state: OuterState) -> dict:
    a = state.arrays()
    a["p"] = state.pressure.values
    return a


def assemble_composite(snap: AsymptoticSnapshot, eps: float,
                       fidelity: str = "order3", include_layers: bool = True) -> CompositeSolution:
    """u^a = u^I + eps u^B(y/sqrt(eps)) + eps^2 w, and eta^a, tau^a, p^a with
    their layer parts scaled by sqrt(eps).  ``include_layers=False`` keeps
    the outer parts only (eps = 0 is allowed then)."""
    if fidelity not in FIDELITIES:
        raise SolverError("invalid-config", f"unknown fidelity {fidelity!r}")
    if eps < 0 or (eps == 0 and include_layers):
        raise SolverError("invalid-config", "eps must be positive when layers are included")
    order = 3 if fidelity == "order3" else 2
    grid = snap.I0.grid
    s = np.sqrt(eps)
    outer = [(1.0, _outer_arrays(snap.I0), "I0"), (eps, _outer_arrays(snap.I2), "I2")]
    if order == 3:
        outer.append((eps * s, _outer_arrays(snap.I3), "I3"))
    ledger = [lbl for _, _, lbl in outer]
    V, DY, DYY = {}, {}, {}
    for q in QUANTITIES:
        v = np.zeros(grid.shape)
        dy = np.zeros(grid.shape)
        dyy = np.zeros(grid.shape)
        for c, arrs, lbl in outer:
            if lbl == "I3" and q not in ("u1", "u2"):
                continue
            if c == 0:
                continue
            v += c * arrs[q]
            dy += c * grid.dy(arrs[q])
            dyy += c * grid.dyy(arrs[q])
        if include_layers:
            for name, power, need in _LAYER_TERMS[q]:
                if need > order:
                    continue
                if name not in snap.layers:
                    raise SolverError("ledger-incomplete", f"profile {name} missing")
                f, fy, fyy = stretch_profile(snap.layers[name], grid.y, eps)
                c = s ** power
                v += c * f
                dy += c * fy
                dyy += c * fyy
                if q == "u1" or name not in ledger:
                    ledger.append(name)
        V[q], DY[q], DYY[q] = v, dy, dyy
    if include_layers and order == 3:
        for n in ("u1_b3", "u1_b4", "u2_b4", "u2_b5"):
            if n not in snap.layers:
                raise SolverError("ledger-incomplete", f"profile {n} missing")
        w = corrector_w(snap.layers, grid, eps, snap.time)
        e2 = eps * eps
        V["u1"] = V["u1"] + e2 * w.w1.values
        V["u2"] = V["u2"] + e2 * w.w2.values
        DY["u1"] = DY["u1"] + e2 * w.dy[0]
        DY["u2"] = DY["u2"] + e2 * w.dy[1]
        DYY["u1"] = DYY["u1"] + e2 * w.dyy[0]
        DYY["u2"] = DYY["u2"] + e2 * w.dyy[1]
        ledger.append("w")
    return CompositeSolution(eps, snap.time, grid, V, DY, DYY,
                             tuple(dict.fromkeys(ledger)), fidelity)


# ---------------------------------------------------------------- error fields

@dataclass
class ErrorFields:
    U: VelocityField
    P: Field2D
    H: Field2D
    Theta: StressField
    eps: float


def error_fields(state: OuterState, comp: CompositeSolution) -> ErrorFields:
    """eps**-1/2 times (true solution - composite), componentwise."""
    if state.grid != comp.grid:
        raise SolverError("grid-mismatch", "solution and composite live on different grids")
    if abs(state.time - comp.time) > 1e-9 * max(1.0, abs(state.time)):
        raise SolverError("trajectory-misaligned",
                          f"solution at t={state.time:g}, composite at t={comp.time:g}")
    a = _outer_arrays(state)
    sc = comp.eps ** -0.5
    g = comp.grid
    f = lambda n: Field2D(g, sc * (a[n] - comp.values[n]), n, comp.time)
    return ErrorFields(VelocityField(f("u1"), f("u2")), f("p"), f("eta"),
                       StressField(f("t11"), f("t12"), f("t22")), comp.eps)


# ---------------------------------------------------------------- residual

_proj_cache = threading.local()


class LerayProjector:
    """Discrete Helmholtz-Leray projection on the strip: v = R - grad q with
    dx v1 + dy v2 = 0 at interior nodes and v2 = 0 on both walls."""

    def __init__(self, grid: StripGrid):
        self.grid = grid
        n = grid.ny
        D1 = grid.D1
        I = sp.identity(n, format="csr")
        interior = np.ones(n)
        interior[[0, -1]] = 0.0
        R = sp.diags(interior)
        Bd = sp.diags(1.0 - interior)
        self.modes = np.arange(1, grid.nx // 2)
        blocks = [R @ (D1 @ D1 - k * k * I) + Bd @ D1 for k in grid.kx[self.modes]]
        self.lu = spla.splu(sp.block_diag(blocks, format="csc")) if blocks else None
        self.interior = interior.astype(bool)

    def __call__(self, r1: np.ndarray, r2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g = self.grid
        F1 = np.fft.rfft(r1, axis=0)
        F2 = np.fft.rfft(r2, axis=0)
        m = self.modes
        ik = 1j * g.kx[m][:, None]
        D1 = g.D1
        rhs = ik * F1[m] + np.asarray(D1 @ F2[m].T).T
        rhs[:, ~self.interior] = F2[m][:, ~self.interior]
        flat = rhs.ravel()
        q = (self.lu.solve(np.ascontiguousarray(flat.real))
             + 1j * self.lu.solve(np.ascontiguousarray(flat.imag))).reshape(rhs.shape)
        V1 = np.zeros_like(F1)
        V2 = np.zeros_like(F2)
        V1[m] = F1[m] - ik * q
        V2[m] = F2[m] - np.asarray(D1 @ q.T).T
        V1[0] = F1[0]          # x-independent part: v2 = 0, v1 untouched
        nx = g.nx
        return np.fft.irfft(V1, n=nx, axis=0), np.fft.irfft(V2, n=nx, axis=0)


def leray_projector(grid: StripGrid) -> LerayProjector:
    cache = getattr(_proj_cache, "d", None)
    if cache is None:
        cache = _proj_cache.d = {}
    if grid.key not in cache:
        cache[grid.key] = LerayProjector(grid)
    return cache[grid.key]


def _bdf2(levels: Sequence[np.ndarray], dt: float) -> np.ndarray:
    a, b, c = levels
    return (3 * c - 4 * b + a) / (2 * dt)


def residual(comps: Sequence[CompositeSolution], params: ModelParams, dt: float,
             scaled: bool = True) -> dict[str, np.ndarray]:
    """Residual of the diffusive system (with ``params.eps``) at the last of
    three consecutive composites.  The momentum residual (pressure gradient
    included, wall rows dropped) is Leray projected;
    ``scaled`` multiplies everything by eps**-1/2."""
    if len(comps) != 3:
        raise ValueError("the BDF2 time derivative needs three time levels")
    c = comps[-1]
    g = c.grid
    eps = params.eps
    if abs(c.eps - eps) > 1e-15:
        raise SolverError("invalid-config", "composite and parameters disagree on eps")
    for a, b in zip(comps[:-1], comps[1:]):
        if abs(b.time - a.time - dt) > 1e-9 * max(1.0, dt):
            raise SolverError("trajectory-misaligned", "composites are not consecutive steps")
    V, DY, DYY = c.values, c.dy, c.dyy
    dt_ = {q: _bdf2([k.values[q] for k in comps], dt) for q in QUANTITIES if q != "p"}
    dx = {q: g.dx(V[q]) for q in V}
    lap = {q: g.dxx(V[q]) + DYY[q] for q in V}
    u1, u2 = V["u1"], V["u2"]
    adv = lambda q: u1 * dx[q] + u2 * DY[q]
    mu, gam, k = params.mu, params.gamma, params.k
    r1 = dt_["u1"] + adv("u1") + dx["p"] - mu * lap["u1"] - dx["t11"] - DY["t12"]
    r2 = dt_["u2"] + adv("u2") + DY["p"] - mu * lap["u2"] - dx["t12"] - DY["t22"]
    # wall rows carry the no-slip condition, not the momentum equation
    r1[:, [0, -1]] = 0.0
    r2[:, [0, -1]] = 0.0
    p1, p2 = leray_projector(g)(r1, r2)
    G = (dx["u1"], DY["u1"], dx["u2"], DY["u2"])
    Q = q_terms(*G, V["t11"], V["t12"], V["t22"])
    B = b_terms(V["eta"], *G, k)
    out = {"m1": p1, "m2": p2, "eta": dt_["eta"] + adv("eta") - eps * lap["eta"]}
    for i, n in enumerate(("t11", "t12", "t22")):
        out[n] = dt_[n] + adv(n) - Q[i] + gam * V[n] - eps * lap[n] - B[i]
    if scaled:
        sc = eps ** -0.5
        out = {n: sc * v for n, v in out.items()}
    return out


def residual_norm(res: Mapping[str, np.ndarray], grid: StripGrid,
                  groups: Sequence[str] | None = None) -> float:
    """H^1_x L^2_y norm of the selected residual components (all by default)."""
    names = groups or list(res)
    total = 0.0
    for n in names:
        f = res[n]
        total += grid.integrate(f ** 2) + grid.integrate(grid.dx(f) ** 2)
    return float(np.sqrt(total))
