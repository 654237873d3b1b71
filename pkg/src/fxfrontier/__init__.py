"""Currency-adjusted stochastic frontier estimation of bank cost efficiency."""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
