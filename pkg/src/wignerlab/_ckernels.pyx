# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled two-index kernels for spectral chain evaluation."""
import numpy as np
cimport cython

ctypedef double complex cplx


cdef inline double _abs2(cplx v) nogil:
    return v.real * v.real + v.imag * v.imag


cdef enum:
    TILE = 64


cdef inline Py_ssize_t _ntiles(Py_ssize_t n) noexcept nogil:
    return (n + TILE - 1) // TILE


cdef void _fused_product(const cplx[:, ::1] a1, const cplx[:, ::1] a2, cplx[:, ::1] out) noexcept nogil:
    # out_ij = a1_ij a2_ji, tiled so both operands stay in cache
    cdef Py_ssize_t n = a1.shape[0], ti, tj, i0, j0, i, j, i1, j1
    for ti in range(_ntiles(n)):
        i0 = ti * TILE
        i1 = min(i0 + TILE, n)
        for tj in range(_ntiles(n)):
            j0 = tj * TILE
            j1 = min(j0 + TILE, n)
            for i in range(i0, i1):
                for j in range(j0, j1):
                    out[i, j] = a1[i, j] * a2[j, i]


def pair_trace(const cplx[::1] k1, const cplx[:, ::1] a1, const cplx[::1] k2, const cplx[:, ::1] a2):
    """``(1/N) sum_ij k1_i a1_ij k2_j a2_ji``."""
    cdef Py_ssize_t n = k1.shape[0], ti, tj, i0, j0, i, j, i1, j1
    cdef cplx acc = 0, row
    with nogil:
        for ti in range(_ntiles(n)):
            i0 = ti * TILE
            i1 = min(i0 + TILE, n)
            for tj in range(_ntiles(n)):
                j0 = tj * TILE
                j1 = min(j0 + TILE, n)
                for i in range(i0, i1):
                    row = 0
                    for j in range(j0, j1):
                        row = row + a1[i, j] * k2[j] * a2[j, i]
                    acc = acc + k1[i] * row
    return complex(acc) / n


def pair_trace_grid(const cplx[:, ::1] k1, const cplx[:, ::1] a1, const cplx[:, ::1] k2, const cplx[:, ::1] a2):
    """``pair_trace`` for each row of the kernel arrays ``k1, k2`` (shape G x N).

    The fused product is formed here; the grid contraction goes to BLAS.
    """
    cdef Py_ssize_t n = k1.shape[1]
    prod_arr = np.empty((n, n), dtype=np.complex128)
    cdef cplx[:, ::1] prod = prod_arr
    with nogil:
        _fused_product(a1, a2, prod)
    return np.einsum("pi,pi->p", k1, np.asarray(k2) @ prod_arr.T) / n


def max_overlap_deviation(const cplx[:, ::1] rot, cplx shift):
    """``max_ij |rot_ij - delta_ij shift|`` with its first maximizer in row-major order."""
    cdef Py_ssize_t n = rot.shape[0], m = rot.shape[1], i, j, bi = 0, bj = 0
    cdef double best = -1.0, v
    cdef cplx d
    with nogil:
        for i in range(n):
            for j in range(m):
                d = rot[i, j]
                if i == j:
                    d = d - shift
                v = _abs2(d)
                if v > best:
                    best = v
                    bi = i
                    bj = j
    return best ** 0.5, bi, bj
