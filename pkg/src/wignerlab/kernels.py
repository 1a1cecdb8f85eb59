"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it is importable; setting
``WIGNERLAB_PURE_PYTHON=1`` forces the numpy fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if os.environ.get("WIGNERLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

__all__ = ["BACKEND", "pair_trace", "pair_trace_grid", "max_overlap_deviation"]


def _c(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.complex128)


def pair_trace(k1, a1, k2, a2) -> complex:
    return complex(_impl.pair_trace(_c(k1), _c(a1), _c(k2), _c(a2)))


def pair_trace_grid(k1, a1, k2, a2) -> np.ndarray:
    return np.asarray(_impl.pair_trace_grid(_c(k1), _c(a1), _c(k2), _c(a2)))


def max_overlap_deviation(rot, shift: complex) -> tuple[float, int, int]:
    best, i, j = _impl.max_overlap_deviation(_c(rot), complex(shift))
    return float(best), int(i), int(j)
