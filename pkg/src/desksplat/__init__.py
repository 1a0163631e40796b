"""Desk-scale differentiable 3D Gaussian splatting trainer.

Self-contained CPU pipeline: float64 software rasterizer with analytic
gradients, adaptive density control under a delayed-growth schedule,
feature-supervised transient masking with a low-to-high resolution cascade,
per-image affine appearance modeling, synthetic dataset generation with
oracle masks/illumination, and a training/evaluation CLI.
"""

__version__ = "0.1.0"

from .errors import ConfigError, ContractError, DataError, NumericsError
from .scene import Camera, Gaussian3D, GaussianSet, ShBasis

__all__ = [
    "Camera",
    "ConfigError",
    "ContractError",
    "DataError",
    "Gaussian3D",
    "GaussianSet",
    "NumericsError",
    "ShBasis",
    "__version__",
]
