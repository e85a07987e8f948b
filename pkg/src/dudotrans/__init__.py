"""Sparse-view CT reconstruction with a dual-domain shifted-window transformer."""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
