"""Outer-region time integrators.

All three systems (diffusive, non-diffusive limit, linearized higher-order
outer) share one IMEX-BDF2 kernel with a BDF1 start:

* viscosity, diffusion and the velocity-pressure coupling are implicit,
* relaxation gamma enters through an exponential integrating factor, so pure
  decay e^{-gamma t} is reproduced exactly,
* transport and the bilinear stress terms are explicit (second-order
  extrapolation).

Incompressibility is imposed per Fourier mode by a monolithic
velocity-pressure solve.  Its continuity rows are collocated at every y node,
so the discrete divergence ``dx u1 + dy u2`` vanishes to round-off and the
Dirichlet rows hold the wall data exactly.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError
from .grid import (Field2D, ModelParams, StressField, StripGrid, VelocityField,
                   b_terms, fd_weights, q_terms)

COMPONENTS = ("u1", "u2", "eta", "t11", "t12", "t22")
SCALARS = ("eta", "t11", "t12", "t22")
CFL_MAX = 0.5


@dataclass
class OuterState:
    vel: VelocityField
    eta: Field2D
    tau: StressField
    pressure: Field2D
    time: float = 0.0
    steps: int = 0
    history: dict | None = field(default=None, repr=False)

    @property
    def grid(self) -> StripGrid:
        return self.eta.grid

    def arrays(self) -> dict[str, np.ndarray]:
        return {"u1": self.vel.u1.values, "u2": self.vel.u2.values, "eta": self.eta.values,
                "t11": self.tau.t11.values, "t12": self.tau.t12.values,
                "t22": self.tau.t22.values}

    @classmethod
    def from_arrays(cls, grid: StripGrid, a: Mapping[str, np.ndarray], p: np.ndarray | None = None,
                    time: float = 0.0, steps: int = 0, history=None, **extra):
        f = lambda n: Field2D(grid, a[n], n, time)
        p = np.zeros(grid.shape) if p is None else p
        return cls(VelocityField(f("u1"), f("u2")), f("eta"),
                   StressField(f("t11"), f("t12"), f("t22")),
                   Field2D(grid, p, "p", time), time, steps, history, **extra)

    @classmethod
    def zeros(cls, grid: StripGrid, **extra):
        return cls.from_arrays(grid, {n: np.zeros(grid.shape) for n in COMPONENTS}, **extra)


@dataclass
class LinearizedOuterState(OuterState):
    """State of the order-2 or order-3 outer system (background is the
    order-0 trajectory supplied at every step)."""
    order: int = 2


@dataclass
class WellPreparedData:
    u0: VelocityField
    eta0: Field2D
    tau0: StressField
    delta: float
    seed: int = 0

    def state(self) -> OuterState:
        g = self.eta0.grid
        a = {"u1": self.u0.u1.values, "u2": self.u0.u2.values, "eta": self.eta0.values,
             "t11": self.tau0.t11.values, "t12": self.tau0.t12.values,
             "t22": self.tau0.t22.values}
        return OuterState.from_arrays(g, {k: v.copy() for k, v in a.items()})


# ---------------------------------------------------------------- implicit solves

_cache = threading.local()


def _factor_cache() -> dict:
    if not hasattr(_cache, "lu"):
        _cache.lu = {}
    return _cache.lu


class _StokesSolver:
    """Solves c u - mu Lap u + grad p = f, div u = 0, u = b at both walls."""

    def __init__(self, grid: StripGrid, mu: float, c: float):
        self.grid = grid
        n = grid.ny
        I = sp.identity(n, format="csr")
        interior = np.ones(n)
        interior[[0, -1]] = 0.0
        R = sp.diags(interior)
        Bd = sp.diags(1.0 - interior)
        D1, D2 = grid.D1, grid.D2
        self.n = n
        self.modes = np.arange(1, grid.nx // 2)
        blocks = []
        for k in grid.kx[self.modes]:
            A = R @ (c * I - mu * (D2 - k * k * I)) + Bd
            blocks.append(sp.bmat([[A, None, (1j * k) * R],
                                   [None, A, R @ D1],
                                   [(1j * k) * I, D1, None]]))
        self.lu = spla.splu(sp.block_diag(blocks, format="csc")) if blocks else None
        # k = 0 and Nyquist: u2 = 0, u1 from a Dirichlet Helmholtz problem
        self.helm = {}
        for m in (0, grid.nx // 2):
            k = grid.kx[m]
            self.helm[m] = spla.splu(sp.csc_matrix(R @ (c * I - mu * (D2 - k * k * I)) + Bd))
        self.interior = interior.astype(bool)

    def solve(self, f1, f2, b1, b2):
        """f1, f2: (nx, ny) forcing; b1, b2: (nx, 2) wall values at y=0, Ly."""
        g = self.grid
        F1 = np.fft.rfft(f1, axis=0)
        F2 = np.fft.rfft(f2, axis=0)
        B1 = np.fft.rfft(b1, axis=0)
        B2 = np.fft.rfft(b2, axis=0)
        F1[:, 0], F1[:, -1] = B1[:, 0], B1[:, 1]
        F2[:, 0], F2[:, -1] = B2[:, 0], B2[:, 1]
        U1 = np.zeros_like(F1)
        U2 = np.zeros_like(F2)
        P = np.zeros_like(F1)
        m = self.modes
        if self.lu is not None:
            rhs = np.concatenate([F1[m], F2[m], np.zeros_like(F1[m])], axis=1).ravel()
            sol = self.lu.solve(rhs).reshape(len(m), 3, self.n)
            U1[m], U2[m], P[m] = sol[:, 0], sol[:, 1], sol[:, 2]
        for mode, lu in self.helm.items():
            U1[mode] = lu.solve(F1[mode].real) + 1j * lu.solve(F1[mode].imag)
        # mean pressure from the normal momentum balance dp/dy = f2, p(Ly) = 0
        f2m = F2[0].real.copy()
        f2m[~self.interior] = f2m[np.r_[1, -2]]
        h = np.diff(g.y)
        cum = np.concatenate(([0.0], np.cumsum(0.5 * h * (f2m[1:] + f2m[:-1]))))
        P[0] = cum - cum[-1]
        nx = g.nx
        u1 = np.fft.irfft(U1, n=nx, axis=0)
        u2 = np.fft.irfft(U2, n=nx, axis=0)
        # the Dirichlet rows are identities; drop the solver's round-off there
        u1[:, 0], u1[:, -1] = b1[:, 0], b1[:, 1]
        u2[:, 0], u2[:, -1] = b2[:, 0], b2[:, 1]
        return u1, u2, np.fft.irfft(P, n=nx, axis=0)


class _ScalarSolver:
    """Solves c th - eps Lap th = f with homogeneous Neumann rows at both walls."""

    def __init__(self, grid: StripGrid, eps: float, c: float):
        self.grid = grid
        self.c = c
        self.eps = eps
        if eps == 0.0:
            self.lu = None
            return
        n = grid.ny
        I = sp.identity(n, format="csr")
        interior = np.ones(n)
        interior[[0, -1]] = 0.0
        R = sp.diags(interior)
        Bd = sp.diags(1.0 - interior)
        blocks = [R @ (c * I - eps * (grid.D2 - k * k * I)) + Bd @ grid.D1 for k in grid.kx]
        self.lu = spla.splu(sp.block_diag(blocks, format="csc"))
        self.nm = len(grid.kx)

    def solve(self, f):
        if self.lu is None:
            return f / self.c
        F = np.fft.rfft(f, axis=0)
        F[:, 0] = 0.0
        F[:, -1] = 0.0
        flat = F.ravel()
        sol = self.lu.solve(np.ascontiguousarray(flat.real)) + 1j * self.lu.solve(
            np.ascontiguousarray(flat.imag))
        return np.fft.irfft(sol.reshape(F.shape), n=self.grid.nx, axis=0)


def _stokes(grid, mu, c) -> _StokesSolver:
    key = ("stokes", grid.key, mu, c)
    cache = _factor_cache()
    if key not in cache:
        cache[key] = _StokesSolver(grid, mu, c)
    return cache[key]


def _scalar(grid, eps, c) -> _ScalarSolver:
    key = ("scalar", grid.key, eps, c)
    cache = _factor_cache()
    if key not in cache:
        cache[key] = _ScalarSolver(grid, eps, c)
    return cache[key]


# ---------------------------------------------------------------- explicit terms

def _gradients(grid: StripGrid, u1, u2):
    return grid.dx(u1), grid.dy(u1), grid.dx(u2), grid.dy(u2)


def _adv(grid, u1, u2, f):
    return u1 * grid.dx(f) + u2 * grid.dy(f)


def nonlinear_terms(grid: StripGrid, a: Mapping[str, np.ndarray], k: float) -> dict:
    """Explicit part of the full system: transport, div tau, Q and B."""
    u1, u2 = a["u1"], a["u2"]
    g11, g12, g21, g22 = _gradients(grid, u1, u2)
    t11, t12, t22 = a["t11"], a["t12"], a["t22"]
    q = q_terms(g11, g12, g21, g22, t11, t12, t22)
    b = b_terms(a["eta"], g11, g12, g21, g22, k)
    n = {
        "u1": -(u1 * g11 + u2 * g12) + grid.dx(t11) + grid.dy(t12),
        "u2": -(u1 * g21 + u2 * g22) + grid.dx(t12) + grid.dy(t22),
        "eta": -_adv(grid, u1, u2, a["eta"]),
    }
    for i, name in enumerate(("t11", "t12", "t22")):
        n[name] = -_adv(grid, u1, u2, a[name]) + q[i] + b[i]
    return n


def linearized_terms(grid: StripGrid, a: Mapping[str, np.ndarray],
                     bg: Mapping[str, np.ndarray], k: float) -> dict:
    """Explicit part of the system linearized about the background ``bg``."""
    u1, u2 = a["u1"], a["u2"]
    v1, v2 = bg["u1"], bg["u2"]
    G = _gradients(grid, u1, u2)
    H = _gradients(grid, v1, v2)
    qa = q_terms(*H, a["t11"], a["t12"], a["t22"])
    qb = q_terms(*G, bg["t11"], bg["t12"], bg["t22"])
    ba = b_terms(a["eta"], *H, k)
    bb = b_terms(bg["eta"], *G, k)
    n = {
        "u1": -(v1 * G[0] + v2 * G[1] + u1 * H[0] + u2 * H[1])
        + grid.dx(a["t11"]) + grid.dy(a["t12"]),
        "u2": -(v1 * G[2] + v2 * G[3] + u1 * H[2] + u2 * H[3])
        + grid.dx(a["t12"]) + grid.dy(a["t22"]),
    }
    for name in ("eta", "t11", "t12", "t22"):
        n[name] = -_adv(grid, v1, v2, a[name]) - _adv(grid, u1, u2, bg[name])
    for i, name in enumerate(("t11", "t12", "t22")):
        n[name] = n[name] + qa[i] + qb[i] + ba[i] + bb[i]
    return n


def second_order_sources(bg: OuterState) -> dict:
    """Laplacians of the background density and stress, the forcing of the
    order-2 outer system."""
    g = bg.grid
    a = bg.arrays()
    return {n: g.dxx(a[n]) + g.dyy(a[n]) for n in SCALARS}


# ---------------------------------------------------------------- the kernel

def max_stable_dt(grid: StripGrid, u1: np.ndarray, u2: np.ndarray) -> float:
    dx = grid.Lx / grid.nx
    rate = np.max(np.abs(u1) / dx + np.abs(u2) / grid.spacing[None, :])
    return np.inf if rate == 0 else CFL_MAX / rate


def _check_cfl(grid, a, dt, extra=None):
    limit = max_stable_dt(grid, a["u1"], a["u2"])
    if extra is not None:
        limit = min(limit, max_stable_dt(grid, extra["u1"], extra["u2"]))
    if dt > limit:
        raise SolverError("unstable-dt", f"dt={dt:g} exceeds advective limit {limit:.3g}")


def _imex(state: OuterState, n_now: dict, dt: float, params: ModelParams, eps: float,
          forcing: Mapping[str, np.ndarray] | None, wall: tuple | None, cls=None, **extra):
    grid = state.grid
    a = state.arrays()
    hist = state.history
    E = np.exp(-params.gamma * dt)
    F = forcing or {}
    if hist is None:
        c = 1.0 / dt
        rhs = {}
        for name in COMPONENTS:
            damp = E if name.startswith("t") else 1.0
            rhs[name] = damp * (a[name] / dt + n_now[name])
    else:
        c = 1.5 / dt
        prev, n_prev = hist["state"], hist["terms"]
        rhs = {}
        for name in COMPONENTS:
            damp = E if name.startswith("t") else 1.0
            rhs[name] = (damp * (4 * a[name] + damp * (-prev[name])) / (2 * dt)
                         + 2 * damp * n_now[name] - damp * damp * n_prev[name])
    for name, f in F.items():
        rhs[name] = rhs[name] + f
    if wall is None:
        b1 = b2 = np.zeros((grid.nx, 2))
    else:
        b1 = np.stack([wall[0], np.zeros(grid.nx)], axis=1)
        b2 = np.stack([wall[1], np.zeros(grid.nx)], axis=1)
    u1, u2, p = _stokes(grid, params.mu, c).solve(rhs["u1"], rhs["u2"], b1, b2)
    sc = _scalar(grid, eps, c)
    new = {"u1": u1, "u2": u2}
    for name in SCALARS:
        new[name] = sc.solve(rhs[name])
    for name, v in new.items():
        if not np.all(np.isfinite(v)):
            raise SolverError("diverged", f"non-finite {name} at t={state.time + dt:g}")
    t = state.time + dt
    history = {"state": {k: v.copy() for k, v in a.items()}, "terms": n_now}
    cls = cls or type(state)
    return cls.from_arrays(grid, new, p, t, state.steps + 1, history, **extra)


def step_diffusive(state: OuterState, params: ModelParams, dt: float,
                   forcing: Mapping[str, np.ndarray] | None = None) -> OuterState:
    """One IMEX step of the diffusive system; ``params.eps = 0`` gives the
    limit system through the same code path.  ``forcing`` holds optional
    body forces for each component evaluated at the new time level."""
    grid = state.grid
    a = state.arrays()
    _check_cfl(grid, a, dt)
    n_now = nonlinear_terms(grid, a, params.k)
    return _imex(state, n_now, dt, params, params.eps, forcing, None, cls=OuterState)


def step_limit(state: OuterState, params: ModelParams, dt: float,
               forcing: Mapping[str, np.ndarray] | None = None) -> OuterState:
    """Non-diffusive system: pure transport-reaction for eta and tau, no
    boundary condition on them."""
    return step_diffusive(state, params.with_eps(0.0), dt, forcing)


def step_linearized(state: LinearizedOuterState, background: OuterState,
                    background_next: OuterState, params: ModelParams, dt: float,
                    wall_next: tuple[np.ndarray, np.ndarray],
                    sources: Mapping[str, np.ndarray] | None = None) -> LinearizedOuterState:
    """One step of the outer system linearized about ``background``.

    ``background`` must sit at ``state.time`` and ``background_next`` at the
    new time.  ``wall_next`` is the prescribed velocity (u1, u2) on y = 0 at
    the new time; ``sources`` are added to the eta/tau equations at the new
    time.  eta and tau carry no diffusion here.
    """
    tol = 1e-9 * max(dt, 1.0)
    if abs(background.time - state.time) > tol or abs(background_next.time - state.time - dt) > tol:
        raise SolverError("trajectory-misaligned",
                          f"state t={state.time:g}, background t={background.time:g}, "
                          f"next t={background_next.time:g}")
    grid = state.grid
    if background.grid != grid:
        raise SolverError("grid-mismatch", "background lives on another grid")
    a = state.arrays()
    bg = background.arrays()
    _check_cfl(grid, bg, dt, a)
    n_now = linearized_terms(grid, a, bg, params.k)
    order = getattr(state, "order", 2)
    return _imex(state, n_now, dt, params, 0.0, sources, wall_next,
                 cls=LinearizedOuterState, order=order)


def divergence_norm(state: OuterState) -> tuple[float, float]:
    """(||div u||, ||grad u||) in L2 over the strip."""
    g = state.grid
    u1, u2 = state.vel.u1.values, state.vel.u2.values
    d = g.dx(u1) + g.dy(u2)
    G = _gradients(g, u1, u2)
    grad = np.sqrt(sum(g.integrate(x ** 2) for x in G))
    return float(np.sqrt(g.integrate(d ** 2))), float(grad)


# ---------------------------------------------------------------- traces

TRACE_STENCIL = 5


@dataclass
class TraceSample:
    """Wall values and y-derivatives (orders 0..3) of a state's components."""
    time: float
    Lx: float
    data: dict

    def get(self, name: str, order: int = 0, dx: int = 0) -> np.ndarray:
        try:
            v = self.data[(name, order)]
        except KeyError:
            raise SolverError("trajectory-misaligned", f"no trace of d^{order}_y {name}") from None
        if dx:
            from .profiles import spectral_dx
            v = spectral_dx(v, self.Lx, dx)
        return v


@dataclass
class BoundaryTraces:
    samples: list = field(default_factory=list)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.time for s in self.samples])

    def append(self, sample: TraceSample) -> None:
        self.samples.append(sample)

    def at_time(self, t: float, tol: float = 1e-9) -> TraceSample:
        for s in self.samples:
            if abs(s.time - t) <= tol:
                return s
        raise SolverError("trajectory-misaligned", f"no trace sample at t={t:g}")


def trace_weights(grid: StripGrid, max_order: int = 3) -> np.ndarray:
    if grid.ny < TRACE_STENCIL:
        raise SolverError("insufficient-resolution",
                          f"traces need {TRACE_STENCIL} y nodes, grid has {grid.ny}")
    return fd_weights(0.0, grid.y[:TRACE_STENCIL], max_order)


def trace_sample(state: OuterState, orders: Mapping[str, int] | int = 3) -> TraceSample:
    g = state.grid
    w = trace_weights(g)
    a = state.arrays()
    a["p"] = state.pressure.values
    if isinstance(orders, int):
        orders = {n: orders for n in a}
    data = {}
    for name, top in orders.items():
        col = a[name][:, :TRACE_STENCIL]
        data[(name, 0)] = a[name][:, 0].copy()
        for m in range(1, top + 1):
            data[(name, m)] = col @ w[m]
    return TraceSample(state.time, g.Lx, data)


def extract_traces(trajectory, orders: Mapping[str, int] | int = 3) -> BoundaryTraces:
    return BoundaryTraces([trace_sample(s, orders) for s in trajectory])


# ---------------------------------------------------------------- initial data

def smooth_step(s: np.ndarray) -> np.ndarray:
    """C-infinity step: 0 for s <= 0, 1 for s >= 1."""
    s = np.clip(s, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)
        b = np.where(s < 1, np.exp(-1.0 / np.where(s < 1, 1.0 - s, 1.0)), 0.0)
    return a / (a + b)


def wall_bump(y: np.ndarray, delta: float, rise: float = 1.0, width: float = 1.0,
              fall: float = 1.5) -> np.ndarray:
    """Zero on [0, delta], rises to 1 over ``rise``, stays flat for ``width``,
    returns to zero over ``fall``."""
    up = smooth_step((y - delta) / rise)
    down = 1.0 - smooth_step((y - delta - rise - width) / fall)
    return up * down


def _series(rng, x, modes, amp):
    out = np.zeros_like(x)
    for m in range(1, modes + 1):
        a, b = rng.normal(size=2) * amp / m ** 2
        out += a * np.cos(m * x) + b * np.sin(m * x)
    return out


def make_well_prepared(seed: int, grid: StripGrid, delta: float = 0.5,
                       amplitude: float = 1.0) -> WellPreparedData:
    """Random smooth data that vanish (velocity) or are y-independent
    (density, stress) in the strip y < delta, so every wall compatibility
    condition holds.  The velocity is the discrete curl of a stream function,
    hence divergence-free for the solver's own operators."""
    if not 0 < delta < grid.Ly / 4:
        raise SolverError("invalid-config", f"delta={delta} must lie in (0, Ly/4)")
    rng = np.random.default_rng(seed)
    x, y = grid.x, grid.y
    chi = wall_bump(y, delta)
    # stream function: a few x-modes whose y-shape varies with the mode
    psi = np.zeros(grid.shape)
    for m in range(1, 4):
        a, b = rng.normal(size=2) * amplitude / m
        shape = chi * (1.0 + 0.5 * rng.normal() * np.sin(np.pi * (y - delta) / 3.0))
        psi += np.outer(a * np.cos(m * x) + b * np.sin(m * x), shape)
    u1 = grid.dy(psi)
    u2 = -grid.dx(psi)
    # density: x-varying wall value plus an interior perturbation
    A = _series(rng, x, 3, 0.2)
    B = _series(rng, x, 3, 0.2)
    eta = 1.0 + A[:, None] + np.outer(0.5 + B, chi) * 0.5
    # stress: symmetric positive definite, y-independent near the wall
    c11, c12, c22 = (_series(rng, x, 3, 0.15) for _ in range(3))
    r11, r12, r22 = (_series(rng, x, 3, 0.15) for _ in range(3))
    t11 = 1.0 + c11[:, None] + np.outer(r11, chi)
    t12 = c12[:, None] + np.outer(r12, chi)
    t22 = 1.0 + c22[:, None] + np.outer(r22, chi)
    f = lambda v, n: Field2D(grid, v, n)
    return WellPreparedData(VelocityField(f(u1, "u1"), f(u2, "u2")), f(eta, "eta"),
                            StressField(f(t11, "t11"), f(t12, "t12"), f(t22, "t22")),
                            delta, seed)
