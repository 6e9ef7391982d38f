"""Backend selection for the dense MLP kernels.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy fallback in ``_pykernels``. Set ``FEDMIX_BACKEND=python`` to force the
fallback (``FEDMIX_BACKEND=cython`` makes a missing extension an error).
"""
import os

import numpy as np

from . import _pykernels

_requested = os.environ.get("FEDMIX_BACKEND", "auto").lower()

if _requested == "python":
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        if _requested == "cython":
            raise
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def mlp_forward(weights, biases, X, impl=None):
    impl = impl or _impl
    return impl.mlp_forward(list(weights), list(biases), _c(X))


def mlp_backward(weights, acts, G, G_pen=None, impl=None):
    impl = impl or _impl
    if G_pen is not None:
        G_pen = _c(G_pen)
    return impl.mlp_backward(list(weights), list(acts), _c(G), G_pen)
