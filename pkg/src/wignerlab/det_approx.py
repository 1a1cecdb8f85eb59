"""Deterministic approximation of resolvent chains.

The matrix ``M(z_1, B_1, ..., B_{k-1}, z_k; J)`` is the sum over non-crossing
partitions ``pi`` of the partial trace over the Kreweras complement of
``pi`` times the product of free cumulants of the (Im-decorated) divided
differences. Indices are 0-based throughout; the last index plays the role of
the distinguished element whose block is left as a matrix product.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import reduce
from typing import Iterable, Sequence

import numpy as np

from .nc_comb import CumulantTable, NcPartition, enumerate_nc, free_cumulants, kreweras, mask_of
from .semicircle import SpectralPoint, divided_difference

__all__ = [
    "DECORATIONS",
    "ObservableMatrix",
    "ChainSpec",
    "BoundReport",
    "partial_trace",
    "cumulant_table",
    "m_matrix",
    "m_det",
    "m_det_avg",
    "m_det_iso",
    "leading_term",
    "m_bound",
    "m_hs_norm_sq",
    "m_hs_norm_sq_bound",
]

# G: resolvent, Im: imaginary part, adj: adjoint, T / ImT: transposes
DECORATIONS = ("G", "Im", "adj", "T", "ImT")
_IMAG = ("Im", "ImT")
MAX_K = 6


@dataclass(frozen=True, eq=False)
class ObservableMatrix:
    """A deterministic N x N observable with cached normalised trace data."""

    data: np.ndarray
    traceless: bool = field(init=False)
    hs_norm: float = field(init=False)
    trace: complex = field(init=False)

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=complex, order="C")
        if data.ndim != 2 or data.shape[0] != data.shape[1]:
            raise ValueError(f"observable must be square, got shape {data.shape}")
        data.setflags(write=False)
        n = data.shape[0]
        hs = math.sqrt(float(np.vdot(data, data).real) / n)
        tr = complex(np.trace(data)) / n
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "hs_norm", hs)
        object.__setattr__(self, "trace", tr)
        object.__setattr__(self, "traceless", abs(tr) <= 1e-12 * max(hs, 1e-300))

    @property
    def N(self) -> int:
        return self.data.shape[0]

    def traceless_part(self) -> "ObservableMatrix":
        return ObservableMatrix(self.data - self.trace * np.eye(self.N))

    def adjoint(self) -> "ObservableMatrix":
        return ObservableMatrix(self.data.conj().T)

    def transpose(self) -> "ObservableMatrix":
        return ObservableMatrix(self.data.T)

    @classmethod
    def identity(cls, N: int) -> "ObservableMatrix":
        return cls(np.eye(N, dtype=complex))


def _as_observable(a) -> ObservableMatrix:
    return a if isinstance(a, ObservableMatrix) else ObservableMatrix(np.asarray(a))


@dataclass(frozen=True, eq=False)
class ChainSpec:
    """A decorated resolvent chain.

    Averaged chains have ``k`` points, ``k - 1`` inner observables and a
    ``closing`` observable; isotropic chains have ``k + 1`` points, ``k``
    observables and a pair of unit ``vectors``.
    """

    points: tuple[SpectralPoint, ...]
    decorations: tuple[str, ...]
    observables: tuple[ObservableMatrix, ...]
    closing: ObservableMatrix | None = None
    vectors: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self) -> None:
        pts = tuple(p if isinstance(p, SpectralPoint) else SpectralPoint(p) for p in self.points)
        obs = tuple(_as_observable(a) for a in self.observables)
        decs = tuple(self.decorations)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "observables", obs)
        object.__setattr__(self, "decorations", decs)
        if len(decs) != len(pts):
            raise ValueError("one decoration per spectral point is required")
        unknown = [d for d in decs if d not in DECORATIONS]
        if unknown:
            raise ValueError(f"unknown decorations {unknown}; expected one of {DECORATIONS}")
        if (self.closing is None) == (self.vectors is None):
            raise ValueError("a chain needs exactly one of a closing observable or a vector pair")
        if self.closing is not None:
            object.__setattr__(self, "closing", _as_observable(self.closing))
            if len(obs) != len(pts) - 1:
                raise ValueError(f"averaged chain with {len(pts)} points needs {len(pts) - 1} inner observables")
        else:
            x, y = (np.asarray(v, dtype=complex) for v in self.vectors)
            for v in (x, y):
                if abs(np.linalg.norm(v) - 1.0) > 1e-12:
                    raise ValueError("isotropic vectors must have unit norm")
            object.__setattr__(self, "vectors", (x, y))
            if len(obs) != len(pts) - 1:
                raise ValueError(f"isotropic chain with {len(pts)} points needs {len(pts) - 1} observables")
        sizes = {a.N for a in self.all_observables}
        if self.vectors is not None:
            sizes |= {len(self.vectors[0]), len(self.vectors[1])}
        if len(sizes) > 1:
            raise ValueError(f"inconsistent dimensions {sorted(sizes)}")

    @classmethod
    def averaged(
        cls,
        zs: Sequence[complex],
        observables: Sequence,
        imag: Iterable[int] = (),
        decorations: Sequence[str] | None = None,
    ) -> "ChainSpec":
        """``<G_1 A_1 ... G_k A_k>``; ``observables`` has length ``k`` and ends with the closing one."""
        if len(observables) != len(zs):
            raise ValueError("an averaged chain takes one observable per spectral point")
        decs = _decorations(len(zs), imag, decorations)
        return cls(tuple(zs), decs, tuple(observables[:-1]), closing=observables[-1])

    @classmethod
    def isotropic(
        cls,
        zs: Sequence[complex],
        observables: Sequence,
        x: np.ndarray,
        y: np.ndarray,
        imag: Iterable[int] = (),
        decorations: Sequence[str] | None = None,
    ) -> "ChainSpec":
        """``<x, G_1 A_1 ... A_k G_{k+1} y>``."""
        decs = _decorations(len(zs), imag, decorations)
        return cls(tuple(zs), decs, tuple(observables), vectors=(x, y))

    @property
    def is_averaged(self) -> bool:
        return self.closing is not None

    @property
    def k(self) -> int:
        """Number of observables in the chain (closing one included)."""
        return len(self.observables) + (1 if self.is_averaged else 0)

    @property
    def N(self) -> int:
        if self.closing is not None:
            return self.closing.N
        return len(self.vectors[0])

    @property
    def imag_set(self) -> frozenset[int]:
        return frozenset(i for i, d in enumerate(self.decorations) if d in _IMAG)

    @property
    def all_observables(self) -> tuple[ObservableMatrix, ...]:
        return self.observables + ((self.closing,) if self.closing is not None else ())

    def effective_points(self) -> tuple[complex, ...]:
        """Points as seen by the scalar approximation: adjoints are conjugated."""
        return tuple(p.z.conjugate() if d == "adj" else p.z for p, d in zip(self.points, self.decorations))


def _decorations(k: int, imag: Iterable[int], decorations: Sequence[str] | None) -> tuple[str, ...]:
    if decorations is not None:
        return tuple(decorations)
    imag = set(imag)
    bad = [i for i in imag if not 0 <= i < k]
    if bad:
        raise ValueError(f"imag indices {bad} out of range for {k} points")
    return tuple("Im" if i in imag else "G" for i in range(k))


@dataclass(frozen=True)
class BoundReport:
    ell: float
    ell_hat: float
    m_bound: float
    error_scale: float


# ---------------------------------------------------------------------------
# partial traces


def _ntrace(mats: Sequence[np.ndarray]) -> complex:
    if len(mats) == 1:
        return complex(np.trace(mats[0])) / mats[0].shape[0]
    prod = np.linalg.multi_dot(mats) if len(mats) > 2 else mats[0] @ mats[1]
    return complex(np.trace(prod)) / prod.shape[0]


def _ntrace_pair(a: np.ndarray, b: np.ndarray) -> complex:
    # <AB> without forming the product
    return complex(np.einsum("ij,ji->", a, b)) / a.shape[0]


def _block_trace(mats: Sequence[np.ndarray]) -> complex:
    if len(mats) == 2:
        return _ntrace_pair(mats[0], mats[1])
    return _ntrace(mats)


def partial_trace(kappa: NcPartition, matrices: Sequence) -> np.ndarray:
    """Partial trace of ``B_1, ..., B_{k-1}`` along ``kappa``.

    Blocks not containing the last index contribute normalised traces of the
    ordered product; the block of the last index contributes the ordered
    matrix product of its other members (identity if none).
    """
    mats = [a.data if isinstance(a, ObservableMatrix) else np.asarray(a, dtype=complex) for a in matrices]
    k = kappa.k
    if len(mats) != k - 1:
        raise ValueError(f"partition of {k} elements needs {k - 1} matrices, got {len(mats)}")
    if not mats:
        raise ValueError("dimension unknown without matrices; use m_matrix with an explicit N")
    N = mats[0].shape[0]
    return _partial_trace(kappa, mats, N)


def _partial_trace(kappa: NcPartition, mats: Sequence[np.ndarray], N: int) -> np.ndarray:
    last = kappa.k - 1
    scalar = 1 + 0j
    residual: tuple[int, ...] = ()
    for block in kappa.blocks:
        if last in block:
            residual = tuple(j for j in block if j != last)
        else:
            scalar *= _block_trace([mats[j] for j in block])
    if not residual:
        return scalar * np.eye(N, dtype=complex)
    prod = reduce(np.matmul, [mats[j] for j in residual])
    return scalar * prod


# ---------------------------------------------------------------------------
# M


def cumulant_table(zs: Sequence[complex], imag: Iterable[int] = ()) -> CumulantTable:
    """Free cumulants of ``m^{(J)}[S]`` over all nonempty subsets of the points."""
    zs = tuple(zs)
    imag = frozenset(imag)
    k = len(zs)

    def mvalue(elems: tuple[int, ...]) -> complex:
        sub = [zs[e] for e in elems]
        flags = [n for n, e in enumerate(elems) if e in imag]
        return divided_difference(sub, flags)

    return free_cumulants(CumulantTable.from_function(k, mvalue))


def _partition_weights(kappa_table: CumulantTable) -> list[tuple[NcPartition, complex]]:
    out = []
    for pi in enumerate_nc(kappa_table.k):
        w = 1 + 0j
        for block in pi.blocks:
            w *= kappa_table.values[mask_of(block)]
        out.append((kreweras(pi), w))
    return out


def _check_k(k: int) -> None:
    if not 1 <= k <= MAX_K:
        raise ValueError(f"chain length {k} outside 1..{MAX_K}")


def m_matrix(zs: Sequence[complex], observables: Sequence, imag: Iterable[int] = (), N: int | None = None) -> np.ndarray:
    """``M(z_1, B_1, ..., B_{k-1}, z_k; J)`` as an N x N matrix."""
    k = len(zs)
    _check_k(k)
    mats = [a.data if isinstance(a, ObservableMatrix) else np.asarray(a, dtype=complex) for a in observables]
    if len(mats) != k - 1:
        raise ValueError(f"{k} points need {k - 1} observables")
    if N is None:
        if not mats:
            raise ValueError("N is required for a chain without observables")
        N = mats[0].shape[0]
    out = np.zeros((N, N), dtype=complex)
    cache: dict[tuple, np.ndarray] = {}
    for kpi, w in _partition_weights(cumulant_table(zs, imag)):
        if w == 0:
            continue
        key = kpi.blocks
        if key not in cache:
            cache[key] = _partial_trace(kpi, mats, N)
        out += w * cache[key]
    return out


def _resolvent_side(chain: ChainSpec) -> tuple[tuple[complex, ...], tuple[ObservableMatrix, ...]]:
    return chain.effective_points(), chain.observables


def m_det(chain: ChainSpec) -> np.ndarray:
    """Deterministic approximation of the resolvent part of ``chain`` as a matrix.

    Transpose decorations use the same scalar data as their plain versions.
    """
    zs, obs = _resolvent_side(chain)
    return m_matrix(zs, obs, chain.imag_set, N=chain.N)


def m_det_avg(chain: ChainSpec) -> complex:
    """``<M_[1,k] A_k>`` for an averaged chain, from traces only."""
    if not chain.is_averaged:
        raise ValueError("m_det_avg needs an averaged chain")
    zs = chain.effective_points()
    k = len(zs)
    _check_k(k)
    mats = [a.data for a in chain.all_observables]
    traces: dict[tuple[int, ...], complex] = {}
    total = 0j
    for kpi, w in _partition_weights(cumulant_table(zs, chain.imag_set)):
        if w == 0:
            continue
        term = w
        for block in kpi.blocks:
            if block not in traces:
                traces[block] = _block_trace([mats[j] for j in block])
            term *= traces[block]
            if term == 0:
                break
        total += term
    return complex(total)


def m_det_iso(chain: ChainSpec) -> complex:
    """``<x, M_[1,k+1] y>`` for an isotropic chain."""
    if chain.is_averaged:
        raise ValueError("m_det_iso needs an isotropic chain")
    zs = chain.effective_points()
    _check_k(len(zs))
    x, y = chain.vectors
    mats = [a.data for a in chain.observables]
    last = len(zs) - 1
    traces: dict[tuple[int, ...], complex] = {}
    vecs: dict[tuple[int, ...], complex] = {}
    total = 0j
    for kpi, w in _partition_weights(cumulant_table(zs, chain.imag_set)):
        if w == 0:
            continue
        term = w
        for block in kpi.blocks:
            if last in block:
                residual = tuple(j for j in block if j != last)
                if residual not in vecs:
                    v = y
                    for j in reversed(residual):
                        v = mats[j] @ v
                    vecs[residual] = complex(np.vdot(x, v))
                term *= vecs[residual]
            else:
                if block not in traces:
                    traces[block] = _block_trace([mats[j] for j in block])
                term *= traces[block]
        total += term
    return complex(total)


def _decorated_m(chain: ChainSpec) -> list[complex]:
    out = []
    for p, d in zip(chain.points, chain.decorations):
        if d in _IMAG:
            out.append(complex(p.m.imag))
        elif d == "adj":
            out.append(p.m.conjugate())
        else:
            out.append(p.m)
    return out


def leading_term(chain: ChainSpec) -> complex:
    """Singleton-partition term: product of (Im) m's times the observable product."""
    coef = complex(np.prod(_decorated_m(chain)))
    mats = [a.data for a in chain.observables]
    if chain.is_averaged:
        mats.append(chain.closing.data)
        return coef * _ntrace(mats)
    x, y = chain.vectors
    v = y
    for a in reversed(mats):
        v = a @ v
    return coef * complex(np.vdot(x, v))


def _ell(points: Sequence[SpectralPoint], imag: frozenset[int]) -> tuple[float, float]:
    ell = min(p.eta * (p.rho + (0.0 if i in imag else 1.0)) for i, p in enumerate(points))
    ell_hat = min(p.eta * p.rho for p in points)
    return ell, ell_hat


def m_bound(chain: ChainSpec) -> BoundReport:
    """Size of M and of the local-law error for ``chain``.

    ``m_bound = prod_J rho * N^(k/2 - 1) * prod hs`` (``N^(k/2)`` for
    isotropic chains) and the error scale replaces the ``rho`` product by
    ``min(prod_J rho, max sqrt(rho))`` and divides by ``sqrt(N ell)``.
    """
    pts = chain.points
    if any(p.eta <= 0 for p in pts):
        raise ValueError("spectral parameters must be off the real axis")
    imag = chain.imag_set
    N = chain.N
    k = chain.k
    ell, ell_hat = _ell(pts, imag)
    if N * ell < 1:
        warnings.warn(f"N*ell = {N * ell:.3g} < 1: outside the regime of the bounds", RuntimeWarning, stacklevel=2)
    rho_prod = math.prod(pts[i].rho for i in imag)
    hs = math.prod(a.hs_norm for a in chain.all_observables)
    npow = N ** (k / 2 - 1) if chain.is_averaged else N ** (k / 2)
    size = rho_prod * npow * hs
    factor = min(rho_prod, max(math.sqrt(p.rho) for p in pts))
    err = factor * npow / math.sqrt(N * ell) * hs
    return BoundReport(ell=ell, ell_hat=ell_hat, m_bound=size, error_scale=err)


def m_hs_norm_sq(chain: ChainSpec) -> float:
    """``<|M|^2>`` of the resolvent part of the chain."""
    M = m_det(chain)
    return float(np.vdot(M, M).real) / M.shape[0]


def m_hs_norm_sq_bound(chain: ChainSpec) -> float:
    """Right side of the ``<|M|^2>`` gain bound, without its implicit constant."""
    pts = chain.points
    imag = chain.imag_set
    N = chain.N
    ell, _ = _ell(pts, imag)
    rho_prod = math.prod(pts[i].rho for i in imag)
    top = max(p.rho + (0.0 if i in imag else 1.0) for i, p in enumerate(pts))
    hs2 = math.prod(a.hs_norm ** 2 for a in chain.observables)
    n_obs = len(chain.observables)
    return N ** n_obs * rho_prod ** 2 * max((top / (N * ell)) ** 2, 1.0 / N) * hs2
