"""Experiment configuration: TOML or JSON, validated, hashable."""
from __future__ import annotations

import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..errors import SolverError
from ..grid import ModelParams, StripGrid

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

EXPERIMENTS = ("mms", "limit-rates", "layer-rates", "residual-order", "scaling-identity",
               "regression")
MIN_LAYER_NODES = 8


@dataclass(frozen=True)
class GridConfig:
    nx: int = 64
    ny: int = 256
    Lx: float = 2 * np.pi
    Ly: float = 8.0
    stretch: float = 1.02

    def build(self) -> StripGrid:
        return StripGrid(self.nx, self.ny, self.Lx, self.Ly, self.stretch)


@dataclass(frozen=True)
class ParamsConfig:
    mu: float = 1.0
    gamma: float = 1.0
    k: float = 1.0

    def build(self, eps: float = 0.0) -> ModelParams:
        return ModelParams(self.mu, self.gamma, self.k, eps)


@dataclass(frozen=True)
class LayerConfig:
    nz: int = 512
    Z: float = 12.0


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "limit-rates"
    grid: GridConfig = field(default_factory=GridConfig)
    params: ParamsConfig = field(default_factory=ParamsConfig)
    layer: LayerConfig = field(default_factory=LayerConfig)
    eps_list: tuple = (4e-2, 2e-2, 1e-2, 5e-3)
    T: float = 0.25
    dt: float = 1e-3
    checkpoint_every: int = 10
    seed: int = 42
    delta: float = 0.5
    fidelity: str = "order3"
    residual_dt: float = 1.25e-4
    residual_every: int = 100
    auto_adjust: bool = False
    outputs: str = "out"
    terms: dict = field(default_factory=dict)

    def validate(self) -> "ExperimentConfig":
        if self.experiment not in EXPERIMENTS:
            raise SolverError("invalid-config", f"unknown experiment {self.experiment!r}")
        eps = list(self.eps_list)
        if any(e <= 0 for e in eps):
            raise SolverError("invalid-config", "eps values must be positive")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise SolverError("invalid-config", "eps_list must be strictly decreasing")
        if self.T <= 0 or self.dt <= 0 or self.residual_dt <= 0:
            raise SolverError("invalid-config", "T and time steps must be positive")
        if self.checkpoint_every < 1 or self.residual_every < 3:
            raise SolverError("invalid-config", "checkpoint cadences too small")
        if self.fidelity not in ("order2", "order3"):
            raise SolverError("invalid-config", f"unknown fidelity {self.fidelity!r}")
        cfg = self
        if eps:
            cfg = cfg._resolve_layer_resolution()
        cfg.grid.build()
        return cfg

    def _resolve_layer_resolution(self) -> "ExperimentConfig":
        """At least MIN_LAYER_NODES y-nodes must sit in [0, sqrt(eps_min)]."""
        h = np.sqrt(min(self.eps_list))
        g = self.grid
        if g.build().nodes_below(h) >= MIN_LAYER_NODES:
            return self
        if not self.auto_adjust:
            raise SolverError("invalid-config",
                              f"fewer than {MIN_LAYER_NODES} y-nodes below sqrt(eps_min)={h:.3g}; "
                              "refine the grid or enable auto_adjust")
        ny = g.ny
        while StripGrid(g.nx, ny, g.Lx, g.Ly, g.stretch).nodes_below(h) < MIN_LAYER_NODES:
            ny *= 2
            if ny > 1 << 14:
                raise SolverError("invalid-config", "layer resolution rule cannot be met")
        log.warning("ny raised from %d to %d to resolve sqrt(eps_min)=%.3g", g.ny, ny, h)
        return replace(self, grid=replace(g, ny=ny))

    # ---- serialization
    def to_dict(self) -> dict:
        d = asdict(self)
        d["eps_list"] = list(self.eps_list)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SolverError("invalid-config", f"unknown keys {sorted(unknown)}")
        kw = dict(d)
        for name, sub in (("grid", GridConfig), ("params", ParamsConfig), ("layer", LayerConfig)):
            if name in kw:
                try:
                    kw[name] = sub(**kw[name])
                except TypeError as e:
                    raise SolverError("invalid-config", f"[{name}]: {e}") from None
        if "eps_list" in kw:
            kw["eps_list"] = tuple(float(e) for e in kw["eps_list"])
        return cls(**kw).validate()

    def digest(self) -> str:
        """sha256 of the canonical JSON form (outputs directory excluded)."""
        d = self.to_dict()
        d.pop("outputs")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if path.suffix == ".toml":
        with path.open("rb") as fh:
            d = tomllib.load(fh)
    elif path.suffix == ".json":
        d = json.loads(path.read_text())
    else:
        raise SolverError("invalid-config", f"config must be .toml or .json, got {path.name}")
    return ExperimentConfig.from_dict(d)
