"""Selects the im2col/col2im implementation at import time.

The compiled extension is preferred.  Set ``BLOCKCS_BACKEND=python`` to force
the numpy fallback, and ``BLOCKCS_THREADS`` to cap the extension's OpenMP
thread count (default 1).
"""
import logging
import os

import numpy as np

from blockcs import _pykernels

logger = logging.getLogger(__name__)

try:
    from blockcs import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_IMPLS = {"python": _pykernels}
if _ckernels is not None:
    _IMPLS["cython"] = _ckernels


def _thread_count():
    raw = os.environ.get("BLOCKCS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"BLOCKCS_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"BLOCKCS_THREADS must be a positive integer, got {raw!r}")
    return n


def available_backends():
    return sorted(_IMPLS)


def _default_backend():
    requested = os.environ.get("BLOCKCS_BACKEND")
    if requested:
        if requested not in _IMPLS:
            logger.warning("backend %r unavailable, using %s", requested, sorted(_IMPLS)[0])
        else:
            return requested
    return "cython" if "cython" in _IMPLS else "python"


_active = _default_backend()
NUM_THREADS = _thread_count()


def active_backend():
    return _active


def set_backend(name):
    """Switch the kernel implementation; returns the previous backend name."""
    global _active
    if name not in _IMPLS:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}")
    previous, _active = _active, name
    return previous


def im2col(x, kh, kw, sh, sw, ph, pw, out_h, out_w):
    x = np.ascontiguousarray(x)
    return _IMPLS[_active].im2col(x, kh, kw, sh, sw, ph, pw, out_h, out_w, NUM_THREADS)


def col2im(cols, shape, kh, kw, sh, sw, ph, pw, out_h, out_w):
    N, C, H, W = shape
    cols = np.ascontiguousarray(cols)
    return _IMPLS[_active].col2im(cols, N, C, H, W, kh, kw, sh, sw, ph, pw, out_h, out_w, NUM_THREADS)
