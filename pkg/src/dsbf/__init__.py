"""Two-stage training with unlabeled-domain bias filtering, on synthetic multi-domain data."""
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
