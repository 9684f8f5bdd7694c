"""Continuous deep-token video modelling at desk scale."""

from . import numerics

numerics.set_precision(64)

__version__ = "0.1.0"
