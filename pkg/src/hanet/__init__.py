"""Hybrid attention crowd counting with a from-scratch autodiff engine."""

from hanet.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
