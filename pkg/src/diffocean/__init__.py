"""Differentiable hybrid ocean model at desk scale.

A finite-difference physics core with learnable diffusivities on a spherical
lat-lon grid, a neural corrector, a small reverse-mode autodiff engine that
trains both jointly, and evaluation by autoregressive rollout.
"""
from .errors import CFLError, ConfigError, DataError, DiffOceanError, NumericalError, ShapeError

__version__ = "0.1.0"

__all__ = ["CFLError", "ConfigError", "DataError", "DiffOceanError", "NumericalError",
           "ShapeError", "__version__"]
