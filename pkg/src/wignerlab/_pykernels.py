"""Pure numpy versions of the compiled kernels in ``_ckernels``."""
from __future__ import annotations

import numpy as np


def pair_trace(k1: np.ndarray, a1: np.ndarray, k2: np.ndarray, a2: np.ndarray) -> complex:
    """``(1/N) sum_ij k1_i a1_ij k2_j a2_ji``."""
    n = k1.shape[0]
    return complex(k1 @ ((a1 * a2.T) @ k2)) / n


def pair_trace_grid(k1: np.ndarray, a1: np.ndarray, k2: np.ndarray, a2: np.ndarray) -> np.ndarray:
    """``pair_trace`` for each row of the kernel arrays ``k1, k2`` (shape G x N)."""
    n = k1.shape[1]
    prod = a1 * a2.T
    return np.einsum("pi,pi->p", k1, k2 @ prod.T) / n


def max_overlap_deviation(rot: np.ndarray, shift: complex) -> tuple[float, int, int]:
    """``max_ij |rot_ij - delta_ij shift|`` with its first maximizer in row-major order."""
    dev = np.abs(rot - shift * np.eye(*rot.shape))
    flat = int(np.argmax(dev))
    i, j = divmod(flat, rot.shape[1])
    return float(dev[i, j]), i, j
