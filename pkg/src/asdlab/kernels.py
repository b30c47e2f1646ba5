"""Hot per-site kernels, compiled when available.

The Cython extension is preferred; the numpy fallback is used when the
extension was not built or when ``ASDLAB_PURE_PYTHON`` is set.
"""

import os

import numpy as np

from . import _kernels_fallback as fallback

BACKEND = "numpy"
_impl = fallback
if not os.environ.get("ASDLAB_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"


def christoffel(ginv, dg):
    return _impl.christoffel(np.ascontiguousarray(ginv, dtype=float),
                             np.ascontiguousarray(dg, dtype=float))


def riemann(G, dG):
    return _impl.riemann(np.ascontiguousarray(G, dtype=float),
                         np.ascontiguousarray(dG, dtype=float))
