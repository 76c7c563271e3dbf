"""Stretched-variable grid and per-column profiles used by the layer solvers."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import SolverError
from .grid import derivative_matrix, write_snapshot


class ZGrid:
    """Uniform grid on [0, Z] for the stretched normal variable z = y / sqrt(eps)."""

    def __init__(self, nz: int = 512, Z: float = 12.0):
        if nz < 64:
            raise SolverError("invalid-config", f"nz must be >= 64, got {nz}")
        if Z < 10:
            raise SolverError("invalid-config", f"layer box Z must be >= 10, got {Z}")
        self.nz = int(nz)
        self.Z = float(Z)
        self.z = np.linspace(0.0, self.Z, self.nz)
        self.h = self.Z / (self.nz - 1)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ZGrid) and (self.nz, self.Z) == (other.nz, other.Z)

    def __hash__(self) -> int:
        return hash((self.nz, self.Z))

    def __repr__(self) -> str:
        return f"ZGrid(nz={self.nz}, Z={self.Z:g})"

    @cached_property
    def D1(self) -> sp.csr_matrix:
        return derivative_matrix(self.z, 1)

    @cached_property
    def D2(self) -> sp.csr_matrix:
        return derivative_matrix(self.z, 2)

    @cached_property
    def wz(self) -> np.ndarray:
        w = np.full(self.nz, self.h)
        w[0] = w[-1] = self.h / 2
        return w


@dataclass
class Profile1D:
    """One boundary-layer profile per x-column, values of shape (nx, nz).

    ``dz`` and ``dzz`` optionally hold derivatives known more accurately than
    a finite difference of ``values`` would give (exact for tail integrals,
    flux-consistent for PDE solutions).  ``flux`` is the prescribed dz at 0.
    """
    zgrid: ZGrid
    values: np.ndarray
    time: float = 0.0
    name: str = ""
    Lx: float = 2 * np.pi
    dz: np.ndarray | None = None
    dzz: np.ndarray | None = None
    flux: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[1] != self.zgrid.nz:
            raise SolverError("grid-mismatch",
                              f"profile has {self.values.shape[1]} z-nodes, grid {self.zgrid.nz}")

    @property
    def nx(self) -> int:
        return self.values.shape[0]

    @property
    def tail(self) -> float:
        return float(np.max(np.abs(self.values[:, -1]))) if self.values.size else 0.0

    @classmethod
    def zeros(cls, zgrid: ZGrid, nx: int, time: float = 0.0, name: str = "",
              Lx: float = 2 * np.pi) -> "Profile1D":
        z = np.zeros((nx, zgrid.nz))
        return cls(zgrid, z, time, name, Lx, dz=z.copy(), dzz=z.copy(), flux=np.zeros(nx))

    def is_zero(self) -> bool:
        return not np.any(self.values)

    def derivative_z(self, order: int = 1) -> np.ndarray:
        if order == 1 and self.dz is not None:
            return self.dz
        if order == 2 and self.dzz is not None:
            return self.dzz
        return z_derivative(self.zgrid, self.values, order)

    def derivative_x(self) -> np.ndarray:
        return spectral_dx(self.values, self.Lx)

    def boundary_value(self) -> np.ndarray:
        return self.values[:, 0].copy()

    def write(self, path, fmt: str = "bin"):
        x = np.arange(self.nx) * self.Lx / self.nx
        return write_snapshot(path, self.values, x, self.zgrid.z, self.Lx, self.zgrid.Z,
                              self.name, self.time, fmt, axis_name="z")


def z_derivative(zgrid: ZGrid, values: np.ndarray, order: int) -> np.ndarray:
    """Finite-difference z derivative of order 0..4 (products of the
    first- and second-derivative matrices)."""
    if order == 0:
        return values
    if order > 4:
        raise SolverError("insufficient-resolution", f"z derivative of order {order}")
    out = values.T
    for step in ([2] * (order // 2) + [1] * (order % 2)):
        out = (zgrid.D2 if step == 2 else zgrid.D1) @ out
    return np.asarray(out).T


def spectral_dx(values: np.ndarray, Lx: float, power: int = 1) -> np.ndarray:
    """Spectral x derivative along axis 0 (Nyquist dropped for odd powers)."""
    nx = values.shape[0]
    if nx == 1 or power == 0:
        return values if power == 0 else np.zeros_like(values)
    k = 2 * np.pi / Lx * np.arange(nx // 2 + 1)
    sym = (1j * k) ** power
    if power % 2 and nx % 2 == 0:
        sym[-1] = 0.0
    shape = (-1,) + (1,) * (values.ndim - 1)
    return np.fft.irfft(sym.reshape(shape) * np.fft.rfft(values, axis=0), n=nx, axis=0)
