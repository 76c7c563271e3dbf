"""Vanishing stress-diffusion limit of a 2-D Oldroyd-B fluid on a half-strip:
outer solvers, boundary-layer profiles, composite approximation and rate
experiments."""
from .errors import SolverError
from .grid import (Field2D, ModelParams, StressField, StripGrid, VelocityField,
                   advect, b_bilinear, ddx, ddy, q_bilinear)
from .profiles import Profile1D, ZGrid

__version__ = "0.1.0"

__all__ = [
    "Field2D", "ModelParams", "Profile1D", "SolverError", "StressField", "StripGrid",
    "VelocityField", "ZGrid", "advect", "b_bilinear", "ddx", "ddy", "q_bilinear",
]
