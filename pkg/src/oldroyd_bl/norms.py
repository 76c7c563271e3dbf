"""Norms on strip fields and layer profiles, the boundary-layer scaling
identity and the anisotropic L-infinity bound.

x integrals use the exact Fourier mean, normal-direction integrals the
trapezoid rule, derivatives reuse the grid operators.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import SolverError
from .grid import Field2D, derivative_matrix
from .profiles import Profile1D, spectral_dx, z_derivative

KINDS = ("L2", "Linf", "Hm", "HmxHlz", "weighted")


@dataclass(frozen=True)
class NormSpec:
    kind: str = "L2"
    m: int = 0
    l: int = 0
    weight: float = 0.0
    inner: "NormSpec | None" = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if not (0 <= self.m <= 4 and 0 <= self.l <= 4):
            raise ValueError("derivative orders must lie in [0, 4]")
        if self.weight < 0:
            raise ValueError("weight exponent must be non-negative")
        if self.kind == "weighted" and (self.inner is None or self.inner.kind == "weighted"):
            raise ValueError("weighted norm needs a non-weighted inner spec")

    def describe(self) -> str:
        if self.kind == "Hm":
            return f"H{self.m}"
        if self.kind == "HmxHlz":
            return f"H{self.m}_x H{self.l}_n"
        if self.kind == "weighted":
            return f"<n>^{self.weight:g} {self.inner.describe()}"
        return self.kind

    def multi_indices(self) -> list[tuple[int, int]]:
        if self.kind in ("L2", "Linf"):
            return [(0, 0)]
        if self.kind == "Hm":
            return [(a, b) for a in range(self.m + 1) for b in range(self.m + 1 - a)]
        return [(a, b) for a in range(self.m + 1) for b in range(self.l + 1)]


L2 = NormSpec("L2")
LINF = NormSpec("Linf")

Fieldish = Union[Field2D, Profile1D]


def _layout(f: Fieldish):
    """Return (values, normal nodes, x measure, normal weights, Lx)."""
    if isinstance(f, Field2D):
        g = f.grid
        return f.values, g.y, g.Lx, g.wy, g.Lx
    zg = f.zgrid
    measure = f.Lx if f.nx > 1 else 1.0
    return f.values, zg.z, measure, zg.wz, f.Lx


def _normal_derivative(f: Fieldish, values: np.ndarray, order: int) -> np.ndarray:
    if order == 0:
        return values
    if isinstance(f, Field2D):
        g = f.grid
        if g.ny < 2 * order + 4:
            raise SolverError("insufficient-resolution", f"{g.ny} nodes for order {order}")
        out = values.T
        for step in [2] * (order // 2) + [1] * (order % 2):
            out = (g.D2 if step == 2 else g.D1) @ out
        return np.asarray(out).T
    if f.zgrid.nz < 2 * order + 4:
        raise SolverError("insufficient-resolution", f"{f.zgrid.nz} nodes for order {order}")
    return z_derivative(f.zgrid, values, order)


def norm(f: Fieldish, spec: NormSpec = L2) -> float:
    values, nodes, measure, w, Lx = _layout(f)
    inner = spec.inner if spec.kind == "weighted" else spec
    weight = (1 + nodes ** 2) ** (spec.weight / 2) if spec.kind == "weighted" else None
    total = 0.0
    for a, b in inner.multi_indices():
        d = spectral_dx(values, Lx, a) if a else values
        d = _normal_derivative(f, d, b)
        if weight is not None and spec.weight != 0:
            d = d * weight[None, :]
        if inner.kind == "Linf":
            return float(np.max(np.abs(d))) if d.size else 0.0
        total += measure * float(np.mean(d ** 2, axis=0) @ w)
    return float(np.sqrt(total))


def scaling_check(f: Profile1D, eps: float, m: int = 0, l: int = 0,
                  ny: int | None = None) -> tuple[float, float, float]:
    """Compare both sides of the stretched-variable norm identity.

    The left side resamples ``f(x, y/sqrt(eps))`` onto an independent uniform
    y-grid (``ny`` nodes over [0, sqrt(eps) Z]) by cubic splines and
    differentiates there; the right side works on the native z-grid.
    Returns ``(lhs, rhs, rel_err)`` with rel_err measured against
    ``eps**(1/4 - m/2) * rhs``.
    """
    zg = f.zgrid
    s = np.sqrt(eps)
    ny = ny or 2 * zg.nz + 1
    y = np.linspace(0.0, s * zg.Z, ny)
    sampled = CubicSpline(zg.z, f.values, axis=1)(y / s)
    dy = _apply_power(derivative_matrix(y, 1), derivative_matrix(y, 2), sampled, m)
    dz = _apply_power(zg.D1, zg.D2, f.values, m)
    wy = np.full(ny, y[1] - y[0])
    wy[0] = wy[-1] = wy[0] / 2
    measure = f.Lx if f.nx > 1 else 1.0
    lhs = _hx_l2(dy, wy, measure, f.Lx, l)
    rhs = _hx_l2(dz, zg.wz, measure, f.Lx, l)
    target = eps ** (0.25 - m / 2) * rhs
    rel = abs(lhs - target) / target if target > 0 else abs(lhs)
    return lhs, rhs, rel


def _apply_power(D1, D2, values, m):
    out = values.T
    for step in [2] * (m // 2) + [1] * (m % 2):
        out = (D2 if step == 2 else D1) @ out
    return np.asarray(out).T


def _hx_l2(values, w, measure, Lx, l):
    total = 0.0
    for a in range(l + 1):
        d = spectral_dx(values, Lx, a) if a else values
        total += measure * float(np.mean(d ** 2, axis=0) @ w)
    return float(np.sqrt(total))


def linf_anisotropic_bound(u: Field2D) -> tuple[float, float]:
    """``(max|u|, sqrt(2) * (|u_x||u_y| + |u||u_xy|)**0.5)`` with L2 norms.

    The bound is a whole-line statement; on a periodic strip it applies to
    fields localized well inside one period.
    """
    g = u.grid
    ux = g.dx(u.values)
    uy = g.dy(u.values)
    uxy = g.dy(ux)
    n = lambda a: np.sqrt(g.integrate(a ** 2))
    lhs = float(np.max(np.abs(u.values)))
    rhs = float(np.sqrt(2.0) * np.sqrt(n(ux) * n(uy) + n(u.values) * n(uxy)))
    return lhs, rhs


def norm_row(name: str, spec: NormSpec, value: float, f: Fieldish) -> dict:
    if isinstance(f, Field2D):
        grid = {"nx": f.grid.nx, "ny": f.grid.ny, "Lx": f.grid.Lx, "Ly": f.grid.Ly,
                "stretch": f.grid.stretch}
    else:
        grid = {"nx": f.nx, "nz": f.zgrid.nz, "Z": f.zgrid.Z, "Lx": f.Lx}
    return {"field": name, "spec": spec.describe(), "value": float(value), "grid": grid}


def norm_rows_json(rows: list[dict]) -> str:
    return json.dumps(rows, sort_keys=True, indent=1)
