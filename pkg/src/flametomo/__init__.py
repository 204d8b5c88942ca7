"""Differentiable rendering and reconstruction for hyperspectral IR flame tomography."""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
