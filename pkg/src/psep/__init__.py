"""Generative signal priors with Langevin source separation and likelihood diagnostics."""

__version__ = "0.1.0"

from .density import DensityModel, DiagonalGaussianPrior
from .signals import Frame, MixSpec, SourceKind, SourceParams

__all__ = [
    "DensityModel",
    "DiagonalGaussianPrior",
    "Frame",
    "MixSpec",
    "SourceKind",
    "SourceParams",
    "__version__",
]
