"""Tree crown segmentation and per-tree detection for orchard aerial images."""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
