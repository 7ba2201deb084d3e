"""Kernel dispatch: compiled extension when importable, Python fallback otherwise.

Set ``SER_RETURNS_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("SER_RETURNS_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def masked_softmax_fwd(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    mask = np.ascontiguousarray(np.broadcast_to(mask, x.shape), dtype=np.uint8)
    return _impl.masked_softmax_fwd(x, mask)


def masked_softmax_bwd(s: np.ndarray, grad: np.ndarray) -> np.ndarray:
    s = np.ascontiguousarray(s, dtype=np.float64)
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    return _impl.masked_softmax_bwd(s, grad)


def gibbs_sweep(words, docs, z, n_dk, n_kw, n_k, uniforms, alpha: float, beta: float) -> None:
    _impl.gibbs_sweep(words, docs, z, n_dk, n_kw, n_k, uniforms, float(alpha), float(beta))
