"""Kernel backend selection.

The compiled Cython module is used when it imports; otherwise the numpy
fallback is used.  Set ``FESURROGATE_BACKEND=python`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

if os.environ.get("FESURROGATE_BACKEND", "").lower() == "python":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND


def get_backend(name=None):
    """Return the kernel module named ``name`` ("cython"/"python"), or the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")


def element_response(dNdX, vol, ue, G, K, order=2, backend=None):
    impl = get_backend(backend)
    return impl.element_response(
        np.ascontiguousarray(dNdX, dtype=np.float64), np.ascontiguousarray(vol, dtype=np.float64),
        np.ascontiguousarray(ue, dtype=np.float64), np.ascontiguousarray(G, dtype=np.float64),
        np.ascontiguousarray(K, dtype=np.float64), int(order))


def pcg(A, b, rtol=1e-10, maxiter=None, backend=None):
    """Jacobi-preconditioned CG on a scipy CSR matrix."""
    impl = get_backend(backend)
    maxiter = 10 * len(b) + 100 if maxiter is None else maxiter
    return impl.pcg(np.ascontiguousarray(A.indptr, dtype=np.int64),
                    np.ascontiguousarray(A.indices, dtype=np.int32),
                    np.ascontiguousarray(A.data, dtype=np.float64),
                    np.ascontiguousarray(b, dtype=np.float64), float(rtol), int(maxiter))
