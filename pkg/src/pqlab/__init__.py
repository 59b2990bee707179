"""Numerical toolkit for integral functionals with (p,q)-growth."""

from ._kernels import backend
from .density import DensityModel, Domain, GrowthEnvelope, instantiate, normalize_at_zero, regularize_infinity
from .fields import DiscreteField, Grid

__all__ = [
    "DensityModel",
    "DiscreteField",
    "Domain",
    "Grid",
    "GrowthEnvelope",
    "backend",
    "instantiate",
    "normalize_at_zero",
    "regularize_infinity",
]

__version__ = "0.1.0"
