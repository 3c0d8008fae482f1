"""Discretized variational regularization of ill-posed operator equations."""
from .kernels import BACKEND

__all__ = ["BACKEND", "__version__"]
__version__ = "0.1.0"
