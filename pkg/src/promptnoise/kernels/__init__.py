"""Numerical kernels with a compiled fast path.

The Cython extension is used when it was built; otherwise the numpy fallback is
imported. Setting ``PROMPTNOISE_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _pykernels

if os.environ.get("PROMPTNOISE_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
        BACKEND = "python"

correlation_map = _impl.correlation_map
histogram_counts = _impl.histogram_counts

__all__ = ["BACKEND", "correlation_map", "histogram_counts"]
