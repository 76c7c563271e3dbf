"""Strip grid, field containers and the shared spatial calculus.

The strip is periodic in x on [0, Lx) and bounded in y on [0, Ly].  x
derivatives are Fourier-spectral, y derivatives are second-order finite
differences on a possibly geometric grid clustered at y = 0.  All fields are
stored nodally as arrays of shape (nx, ny).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import SolverError


def fd_weights(x0: float, nodes: Sequence[float], order: int) -> np.ndarray:
    """Finite-difference weights on arbitrary nodes (Fornberg's recursion).

    Returns an array ``w`` of shape (order + 1, len(nodes)); ``w[m] @ f``
    approximates the m-th derivative of f at ``x0``.
    """
    nodes = np.asarray(nodes, dtype=float)
    n = len(nodes)
    c = np.zeros((order + 1, n))
    c[0, 0] = 1.0
    c1 = 1.0
    c4 = nodes[0] - x0
    for i in range(1, n):
        mn = min(i, order)
        c2 = 1.0
        c5 = c4
        c4 = nodes[i] - x0
        for j in range(i):
            c3 = nodes[i] - nodes[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[k, i] = c1 * (k * c[k - 1, i - 1] - c5 * c[k, i - 1]) / c2
                c[0, i] = -c1 * c5 * c[0, i - 1] / c2
            for k in range(mn, 0, -1):
                c[k, j] = (c4 * c[k, j] - k * c[k - 1, j]) / c3
            c[0, j] = c4 * c[0, j] / c3
        c1 = c2
    return c


def stretched_nodes(n: int, length: float, ratio: float) -> np.ndarray:
    """Nodes on [0, length] whose spacing grows geometrically by ``ratio``."""
    if ratio == 1.0:
        return np.linspace(0.0, length, n)
    steps = ratio ** np.arange(n - 1)
    nodes = np.concatenate(([0.0], np.cumsum(steps)))
    nodes *= length / nodes[-1]
    nodes[-1] = length
    return nodes


def derivative_matrix(nodes: np.ndarray, order: int) -> sp.csr_matrix:
    """Sparse y-derivative matrix: centred three-point stencils inside,
    one-sided stencils at both ends (three points for the first derivative,
    four for the second, so both stay second order)."""
    n = len(nodes)
    rows, cols, vals = [], [], []
    width = 3 if order == 1 else 4
    for i in range(n):
        if 0 < i < n - 1:
            idx = [i - 1, i, i + 1]
        elif i == 0:
            idx = list(range(width))
        else:
            idx = list(range(n - width, n))
        w = fd_weights(nodes[i], nodes[idx], order)[order]
        rows += [i] * len(idx)
        cols += idx
        vals += list(w)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


class StripGrid:
    """Periodic-x, bounded-y tensor grid."""

    def __init__(self, nx: int, ny: int, Lx: float = 2 * np.pi, Ly: float = 8.0,
                 stretch: float = 1.0):
        if nx < 8 or nx % 2:
            raise SolverError("invalid-config", f"nx must be even and >= 8, got {nx}")
        if ny < 8:
            raise SolverError("invalid-config", f"ny must be >= 8, got {ny}")
        if Lx <= 0 or Ly <= 0:
            raise SolverError("invalid-config", "Lx and Ly must be positive")
        if not 1.0 <= stretch <= 1.2:
            raise SolverError("invalid-config", f"stretch ratio {stretch} outside [1, 1.2]")
        self.nx, self.ny = int(nx), int(ny)
        self.Lx, self.Ly = float(Lx), float(Ly)
        self.stretch = float(stretch)
        self.x = np.arange(self.nx) * self.Lx / self.nx
        self.y = stretched_nodes(self.ny, self.Ly, self.stretch)
        self.kx = 2 * np.pi / self.Lx * np.arange(self.nx // 2 + 1)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, StripGrid) and self.key == other.key

    def __hash__(self) -> int:
        return hash(self.key)

    def __repr__(self) -> str:
        return (f"StripGrid(nx={self.nx}, ny={self.ny}, Lx={self.Lx:g}, "
                f"Ly={self.Ly:g}, stretch={self.stretch:g})")

    @property
    def key(self) -> tuple:
        return (self.nx, self.ny, self.Lx, self.Ly, self.stretch)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @cached_property
    def X(self) -> np.ndarray:
        return np.broadcast_to(self.x[:, None], self.shape)

    @cached_property
    def Y(self) -> np.ndarray:
        return np.broadcast_to(self.y[None, :], self.shape)

    @cached_property
    def ik(self) -> np.ndarray:
        # first-derivative symbol; the Nyquist mode has no real derivative
        ik = 1j * self.kx
        ik[-1] = 0.0
        return ik

    @cached_property
    def D1(self) -> sp.csr_matrix:
        return derivative_matrix(self.y, 1)

    @cached_property
    def D2(self) -> sp.csr_matrix:
        return derivative_matrix(self.y, 2)

    @cached_property
    def wy(self) -> np.ndarray:
        """Trapezoid weights in y."""
        h = np.diff(self.y)
        w = np.zeros(self.ny)
        w[:-1] += h / 2
        w[1:] += h / 2
        return w

    @cached_property
    def spacing(self) -> np.ndarray:
        """Local y spacing at each node (the smaller adjacent interval)."""
        h = np.diff(self.y)
        return np.minimum(np.concatenate(([h[0]], h)), np.concatenate((h, [h[-1]])))

    def nodes_below(self, height: float) -> int:
        return int(np.count_nonzero(self.y <= height * (1 + 1e-12)))

    # raw-array calculus, used by the solvers
    def dx(self, a: np.ndarray) -> np.ndarray:
        return np.fft.irfft(self.ik[:, None] * np.fft.rfft(a, axis=0), n=self.nx, axis=0)

    def dxx(self, a: np.ndarray) -> np.ndarray:
        return np.fft.irfft(-(self.kx ** 2)[:, None] * np.fft.rfft(a, axis=0),
                            n=self.nx, axis=0)

    def dy(self, a: np.ndarray) -> np.ndarray:
        return np.asarray((self.D1 @ a.T).T)

    def dyy(self, a: np.ndarray) -> np.ndarray:
        return np.asarray((self.D2 @ a.T).T)

    def integrate(self, a: np.ndarray) -> float:
        """Integral over the strip: exact Fourier mean in x, trapezoid in y."""
        return float(self.Lx * np.mean(a, axis=0) @ self.wy)


@dataclass
class Field2D:
    grid: StripGrid
    values: np.ndarray
    name: str = ""
    time: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise SolverError("grid-mismatch",
                              f"values {self.values.shape} vs grid {self.grid.shape}")

    def __add__(self, other: "Field2D") -> "Field2D":
        return Field2D(self.grid, self.values + _vals(other), self.name, self.time)

    def __sub__(self, other: "Field2D") -> "Field2D":
        return Field2D(self.grid, self.values - _vals(other), self.name, self.time)

    def __mul__(self, c: float) -> "Field2D":
        return Field2D(self.grid, self.values * c, self.name, self.time)

    __rmul__ = __mul__

    @classmethod
    def zeros(cls, grid: StripGrid, name: str = "") -> "Field2D":
        return cls(grid, np.zeros(grid.shape), name)

    @classmethod
    def from_function(cls, grid: StripGrid, fn, name: str = "") -> "Field2D":
        return cls(grid, np.broadcast_to(fn(grid.X, grid.Y), grid.shape).copy(), name)


def _vals(f) -> np.ndarray:
    return f.values if isinstance(f, Field2D) else np.asarray(f)


@dataclass
class VelocityField:
    u1: Field2D
    u2: Field2D


@dataclass
class StressField:
    """Symmetric 2x2 tensor; only the three independent components are kept."""
    t11: Field2D
    t12: Field2D
    t22: Field2D

    def components(self) -> tuple[Field2D, Field2D, Field2D]:
        return (self.t11, self.t12, self.t22)


@dataclass(frozen=True)
class ModelParams:
    mu: float = 1.0
    gamma: float = 1.0
    k: float = 1.0
    eps: float = 0.0

    def __post_init__(self):
        if self.mu <= 0 or self.gamma <= 0 or self.k <= 0:
            raise SolverError("invalid-config", "mu, gamma and k must be positive")
        if self.eps < 0:
            raise SolverError("invalid-config", "eps must be non-negative")

    def with_eps(self, eps: float) -> "ModelParams":
        return ModelParams(self.mu, self.gamma, self.k, eps)


# field-level operations

def ddx(f: Field2D) -> Field2D:
    return Field2D(f.grid, f.grid.dx(f.values), f.name, f.time)


def ddy(f: Field2D, order: int = 1) -> Field2D:
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if f.grid.ny < 4:
        raise SolverError("insufficient-resolution", "ddy needs at least 4 nodes")
    op = f.grid.dy if order == 1 else f.grid.dyy
    return Field2D(f.grid, op(f.values), f.name, f.time)


def velocity_gradient(vel: VelocityField) -> list[list[Field2D]]:
    """Entries ``G[i][j] = d_j u_i``."""
    return [[ddx(vel.u1), ddy(vel.u1)], [ddx(vel.u2), ddy(vel.u2)]]


def q_terms(g11, g12, g21, g22, t11, t12, t22):
    """Components of grad(u) tau + tau grad(u)^T on raw arrays."""
    q11 = 2 * (g11 * t11 + g12 * t12)
    q12 = g11 * t12 + g12 * t22 + t11 * g21 + t12 * g22
    q22 = 2 * (g21 * t12 + g22 * t22)
    return q11, q12, q22


def b_terms(eta, g11, g12, g21, g22, k: float):
    """Components of k eta (grad u + grad u^T) on raw arrays."""
    return 2 * k * eta * g11, k * eta * (g12 + g21), 2 * k * eta * g22


def q_bilinear(gradu: Sequence[Sequence[Field2D]], tau: StressField) -> StressField:
    g = [[_vals(gradu[i][j]) for j in range(2)] for i in range(2)]
    grid = tau.t11.grid
    q = q_terms(g[0][0], g[0][1], g[1][0], g[1][1],
                tau.t11.values, tau.t12.values, tau.t22.values)
    return StressField(*(Field2D(grid, c) for c in q))


def b_bilinear(eta: Field2D, gradu: Sequence[Sequence[Field2D]], k: float) -> StressField:
    g = [[_vals(gradu[i][j]) for j in range(2)] for i in range(2)]
    b = b_terms(eta.values, g[0][0], g[0][1], g[1][0], g[1][1], k)
    return StressField(*(Field2D(eta.grid, c) for c in b))


def advect(vel: VelocityField, f: Field2D) -> Field2D:
    grid = f.grid
    vals = vel.u1.values * grid.dx(f.values) + vel.u2.values * grid.dy(f.values)
    return Field2D(grid, vals, f.name, f.time)


def divergence(vel: VelocityField) -> Field2D:
    grid = vel.u1.grid
    return Field2D(grid, grid.dx(vel.u1.values) + grid.dy(vel.u2.values))


# snapshot format: JSON header plus row-major float64 data with x fastest

def write_snapshot(path: str | Path, values: np.ndarray, x: np.ndarray, y_nodes: np.ndarray,
                   Lx: float, Ly: float, name: str, time: float, fmt: str = "bin",
                   axis_name: str = "y") -> list[Path]:
    path = Path(path)
    header = {"nx": int(values.shape[0]), "ny": int(values.shape[1]), "Lx": float(Lx),
              "Ly": float(Ly), "y_nodes": [float(v) for v in y_nodes], "name": name,
              "time": float(time), "axis": axis_name, "layout": "row-major, x fastest",
              "format": fmt}
    head = path.with_suffix(".json")
    head.write_text(json.dumps(header, sort_keys=True))
    data = np.ascontiguousarray(np.asarray(values, dtype="<f8").T)
    if fmt == "bin":
        body = path.with_suffix(".bin")
        body.write_bytes(data.tobytes())
    else:
        body = path.with_suffix(".csv")
        np.savetxt(body, data, delimiter=",", fmt="%.17g")
    return [head, body]


def read_snapshot(path: str | Path) -> tuple[dict, np.ndarray]:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    nx, ny = header["nx"], header["ny"]
    if header["format"] == "bin":
        data = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
        data = data.reshape(ny, nx)
    else:
        data = np.loadtxt(path.with_suffix(".csv"), delimiter=",").reshape(ny, nx)
    return header, data.T.copy()


def write_field(path: str | Path, f: Field2D, fmt: str = "bin") -> list[Path]:
    g = f.grid
    return write_snapshot(path, f.values, g.x, g.y, g.Lx, g.Ly, f.name, f.time, fmt)
