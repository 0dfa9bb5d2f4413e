"""Passivity analysis of sampled and quantized feedback loops with symbolic controllers."""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
