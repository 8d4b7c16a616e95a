"""Uncertainty-aware CNN regression on projected volumetric body phantoms."""

from ._kernels import active_backend

__version__ = "0.1.0"

__all__ = ["active_backend", "__version__"]
