"""Kernel dispatch: the compiled extension when available, numpy otherwise.

Set ``FXFRONTIER_PURE=1`` before import to force the numpy implementations.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("FXFRONTIER_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

log_ndtr = _impl.log_ndtr_array
mills = _impl.mills
sfa_terms = _impl.sfa_terms
bc_scores = _impl.bc_scores
garch_filter = _impl.garch_filter
garch_loglik_grad = _impl.garch_loglik_grad
lcv_grid = _impl.lcv_grid
kde_grid = _kernels_py.kde_grid

__all__ = [
    "BACKEND", "log_ndtr", "mills", "sfa_terms", "bc_scores", "garch_filter",
    "garch_loglik_grad", "lcv_grid", "kde_grid",
]
