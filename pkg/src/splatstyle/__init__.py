"""Style-conditioned 3D Gaussian splatting, desk-scale and self-contained."""

from .kernels import BACKEND, set_threads

__all__ = ["BACKEND", "set_threads"]
__version__ = "0.1.0"
