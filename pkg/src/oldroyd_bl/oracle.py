"""Reference solutions used to check the solvers.

Everything here is computed independently of the discretizations in
``outer`` and ``layer``: closed forms, adaptive quadrature, and symbolic
differentiation of manufactured solutions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import sympy as sym
from scipy import integrate, special

from .errors import SolverError


@dataclass(frozen=True)
class ClosedFormProfile:
    """Half-line solution with zero initial data and constant wall flux -g."""
    kind: str
    g: float = 1.0
    gamma0: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant-flux-heat", "reaction-duhamel"):
            raise ValueError(f"unknown profile kind {self.kind!r}")

    def __call__(self, z, t):
        if self.kind == "constant-flux-heat":
            return erfc_flux_solution(self.g, z, t)
        return duhamel_reaction_solution(self.g, self.gamma0, z, t)


def erfc_flux_solution(g: float, z, t: float):
    """Heat equation on z > 0 from rest with dz(theta)(0, t) = -g."""
    if t <= 0:
        raise ValueError("t must be positive")
    z = np.asarray(z, dtype=float)
    st = np.sqrt(t)
    return g * (2 * st / np.sqrt(np.pi) * np.exp(-z ** 2 / (4 * t))
                - z * special.erfc(z / (2 * st)))


def duhamel_reaction_solution(g: float, gamma0: float, z, t: float, tol: float = 1e-9):
    """Solution of th_t + gamma0 th - th_zz = 0 from rest with flux -g.

    Duhamel's formula gives th = g int_0^t exp(-gamma0 s - z^2/(4s)) / sqrt(pi s) ds;
    with s = sigma^2 the integrand is smooth and is integrated adaptively.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    if gamma0 < 0:
        raise ValueError("gamma0 must be non-negative")
    zs = np.atleast_1d(np.asarray(z, dtype=float))
    out = np.empty_like(zs)
    for i, zi in enumerate(zs):
        f = lambda s, zi=zi: 2 / np.sqrt(np.pi) * np.exp(
            -gamma0 * s * s - (zi * zi / (4 * s * s) if s > 0 else (np.inf if zi else 0.0)))
        val, err = integrate.quad(f, 0.0, np.sqrt(t), epsabs=1e-13, epsrel=1e-12, limit=200)
        if err > tol:
            raise SolverError("quadrature", f"estimated error {err:.2e} at z={zi:g}")
        out[i] = g * val
    return out if np.ndim(z) else float(out[0])


# ---------------------------------------------------------------- manufactured solutions

X, Y, T = sym.symbols("x y t", real=True)
NAMES = ("u1", "u2", "eta", "t11", "t12", "t22")


def mms_forcing(targets: Mapping[str, sym.Expr], mu: float, gamma: float, k: float,
                eps: float, pressure: sym.Expr = sym.Integer(0)) -> dict[str, sym.Expr]:
    """Body forces that make ``targets`` an exact solution of the forced system.

    ``targets`` maps u1, u2, eta, t11, t12, t22 to sympy expressions in x, y, t.
    """
    u1, u2, eta = (sym.sympify(targets[n]) for n in ("u1", "u2", "eta"))
    t11, t12, t22 = (sym.sympify(targets[n]) for n in ("t11", "t12", "t22"))
    d = sym.diff
    adv = lambda f: u1 * d(f, X) + u2 * d(f, Y)
    lap = lambda f: d(f, X, 2) + d(f, Y, 2)
    G = [[d(u1, X), d(u1, Y)], [d(u2, X), d(u2, Y)]]
    S = [[t11, t12], [t12, t22]]
    Q = [[sum(G[i][m] * S[m][j] + S[i][m] * G[j][m] for m in range(2)) for j in range(2)]
         for i in range(2)]
    Bm = [[k * eta * (G[i][j] + G[j][i]) for j in range(2)] for i in range(2)]
    f = {
        "u1": d(u1, T) + adv(u1) + d(pressure, X) - mu * lap(u1) - d(t11, X) - d(t12, Y),
        "u2": d(u2, T) + adv(u2) + d(pressure, Y) - mu * lap(u2) - d(t12, X) - d(t22, Y),
        "eta": d(eta, T) + adv(eta) - eps * lap(eta),
    }
    for name, (i, j) in (("t11", (0, 0)), ("t12", (0, 1)), ("t22", (1, 1))):
        tij = S[i][j]
        f[name] = d(tij, T) + adv(tij) - Q[i][j] + gamma * tij - eps * lap(tij) - Bm[i][j]
    return f


def lambdify_fields(exprs: Mapping[str, sym.Expr]) -> dict[str, Callable]:
    """numpy callables f(x, y, t) broadcasting to the argument shape."""
    out = {}
    for n, e in exprs.items():
        fn = sym.lambdify((X, Y, T), e, "numpy")
        out[n] = (lambda fn: lambda x, y, t: np.broadcast_to(
            fn(x, y, t), np.broadcast(x, y).shape).astype(float))(fn)
    return out


def channel_targets(Ly: float, amp: float = 0.5) -> tuple[dict, sym.Expr]:
    """Smooth, time-dependent fields that satisfy every wall condition of the
    diffusive system on [0, 2 pi) x [0, Ly]: no-slip velocity built from a
    stream function, zero normal derivative of eta and tau at both walls."""
    a = sym.pi / Ly
    S = sym.sin(a * Y) ** 2
    psi = amp * sym.cos(T) * sym.sin(X) * S
    u1 = sym.diff(psi, Y)
    u2 = -sym.diff(psi, X)
    eta = 1 + sym.Rational(3, 10) * sym.cos(X) * sym.cos(a * Y) * sym.exp(-T)
    t11 = 1 + sym.Rational(1, 5) * sym.sin(X + T) * sym.cos(2 * a * Y)
    t12 = sym.Rational(1, 4) * sym.cos(X) * sym.cos(a * Y) * (1 + T)
    t22 = 1 + sym.Rational(1, 5) * sym.cos(2 * X) * sym.cos(a * Y) ** 2 * sym.cos(T)
    p = sym.sin(X) * sym.cos(a * Y) * sym.cos(T)
    return {"u1": u1, "u2": u2, "eta": eta, "t11": t11, "t12": t12, "t22": t22}, p
