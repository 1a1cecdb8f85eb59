"""Spectral evaluation of decorated resolvent chains and fluctuation statistics.

Chains are contracted in the eigenbasis: each observable is rotated once,
after which every resolvent is a diagonal kernel. Transposed resolvents
``G^t = conj(U) K U^t`` use the conjugate basis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .det_approx import ChainSpec, ObservableMatrix, m_bound, m_det_avg, m_det_iso
from .ensembles import WignerMatrix
from .semicircle import SpectralPoint

__all__ = [
    "EigenDecomp",
    "ChainValue",
    "eigendecompose",
    "resolvent_kernel",
    "chain_avg",
    "chain_iso",
    "chain_avg_value",
    "chain_iso_value",
    "pair_chain_grid",
    "chain_dense",
    "ward_residual",
    "eth_statistic",
    "max_overlap",
    "overlap_matrix",
    "gue_variance_check",
]

_TRANSPOSED = ("T", "ImT")


class EigensolverError(ArithmeticError):
    """The eigendecomposition failed its residual or unitarity checks."""


@dataclass(frozen=True, eq=False)
class EigenDecomp:
    """Ascending eigenvalues and the unitary matrix of column eigenvectors."""

    lambdas: np.ndarray
    basis: np.ndarray
    _rotations: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def N(self) -> int:
        return len(self.lambdas)

    def frame(self, transposed: bool) -> np.ndarray:
        return self.basis.conj() if transposed else self.basis

    def rotate(self, A: ObservableMatrix | np.ndarray, left_t: bool = False, right_t: bool = False) -> np.ndarray:
        """``V_l^* A V_r`` with ``V = conj(U)`` on transposed sides; cached per observable."""
        data = A.data if isinstance(A, ObservableMatrix) else np.asarray(A, dtype=complex)
        if data.shape != (self.N, self.N):
            raise ValueError(f"observable of shape {data.shape} does not match N={self.N}")
        key = (id(A), left_t, right_t)
        hit = self._rotations.get(key)
        if hit is not None and hit[0] is A:
            return hit[1]
        out = self.frame(left_t).conj().T @ data @ self.frame(right_t)
        out.setflags(write=False)
        self._rotations[key] = (A, out)
        return out


@dataclass(frozen=True)
class ChainValue:
    """A chain value, its deterministic approximation and the normalized fluctuation."""

    value: complex
    m_value: complex
    fluctuation: complex
    normalized: float
    scale: float

    @classmethod
    def build(cls, value: complex, m_value: complex, scale: float) -> "ChainValue":
        fl = value - m_value
        return cls(value, m_value, fl, abs(fl) / scale if scale > 0 else math.inf, scale)


def eigendecompose(W: WignerMatrix | np.ndarray, *, check: bool = True, n_check: int = 8) -> EigenDecomp:
    """Hermitian eigendecomposition with residual and unitarity checks."""
    H = W.entries if isinstance(W, WignerMatrix) else np.asarray(W)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("a square matrix is required")
    scale = float(np.abs(H).max()) if H.size else 0.0
    if np.abs(H - H.conj().T).max() > 1e-12 * max(scale, 1.0):
        raise ValueError("matrix is not Hermitian")
    lam, U = np.linalg.eigh(H)
    if check:
        N = len(lam)
        norm = max(float(np.abs(lam).max()), 1e-300)
        cols = np.unique(np.linspace(0, N - 1, min(n_check, N)).astype(int))
        res = np.linalg.norm(H @ U[:, cols] - U[:, cols] * lam[cols], axis=0)
        if res.max() > 1e-10 * norm:
            raise EigensolverError(f"eigenvector residual {res.max():.3g}")
        if np.abs(U.conj().T @ U - np.eye(N)).max() > 1e-10:
            raise EigensolverError("eigenvectors are not orthonormal")
    lam.setflags(write=False)
    U.setflags(write=False)
    return EigenDecomp(lam, U)


def resolvent_kernel(lambdas: np.ndarray, z: complex, decoration: str) -> np.ndarray:
    """Diagonal of a decorated resolvent in its eigenbasis."""
    if decoration in ("G", "T"):
        return 1.0 / (lambdas - z)
    if decoration == "adj":
        return 1.0 / (lambdas - np.conj(z))
    if decoration in ("Im", "ImT"):
        # Im 1/(x - z) = Im z / |x - z|^2
        return (z.imag / ((lambdas - z.real) ** 2 + z.imag ** 2)).astype(complex)
    raise ValueError(f"unknown decoration {decoration!r}")


def _chain_pieces(decomp: EigenDecomp, chain: ChainSpec):
    if chain.N != decomp.N:
        raise ValueError(f"chain dimension {chain.N} does not match decomposition N={decomp.N}")
    kern = [resolvent_kernel(decomp.lambdas, p.z, d) for p, d in zip(chain.points, chain.decorations)]
    flags = [d in _TRANSPOSED for d in chain.decorations]
    return kern, flags


def chain_avg_value(decomp: EigenDecomp, chain: ChainSpec) -> complex:
    """``<G_1 A_1 ... G_k A_k>`` by kernel contraction in the eigenbasis."""
    if not chain.is_averaged:
        raise ValueError("chain_avg needs an averaged chain")
    kern, flags = _chain_pieces(decomp, chain)
    obs = chain.all_observables
    k = len(kern)
    rot = [decomp.rotate(obs[j], flags[j], flags[(j + 1) % k]) for j in range(k)]
    if k == 1:
        return complex(np.dot(kern[0], np.diagonal(rot[0]))) / decomp.N
    if k == 2:
        return kernels.pair_trace(kern[0], rot[0], kern[1], rot[1])
    X = kern[0][:, None] * rot[0]
    for j in range(1, k - 1):
        X = (X * kern[j][None, :]) @ rot[j]
    X = X * kern[k - 1][None, :]
    return complex(np.einsum("ij,ji->", X, rot[k - 1])) / decomp.N


def chain_iso_value(decomp: EigenDecomp, chain: ChainSpec) -> complex:
    """``<x, G_1 A_1 ... A_k G_(k+1) y>`` by kernel contraction."""
    if chain.is_averaged:
        raise ValueError("chain_iso needs an isotropic chain")
    kern, flags = _chain_pieces(decomp, chain)
    x, y = chain.vectors
    xt = decomp.frame(flags[0]).conj().T @ x
    v = kern[-1] * (decomp.frame(flags[-1]).conj().T @ y)
    for j in reversed(range(len(chain.observables))):
        v = kern[j] * (decomp.rotate(chain.observables[j], flags[j], flags[j + 1]) @ v)
    return complex(np.vdot(xt, v))


def chain_avg(decomp: EigenDecomp, chain: ChainSpec) -> ChainValue:
    return ChainValue.build(chain_avg_value(decomp, chain), m_det_avg(chain), m_bound(chain).error_scale)


def chain_iso(decomp: EigenDecomp, chain: ChainSpec) -> ChainValue:
    return ChainValue.build(chain_iso_value(decomp, chain), m_det_iso(chain), m_bound(chain).error_scale)


def pair_chain_grid(
    decomp: EigenDecomp,
    A1: ObservableMatrix,
    A2: ObservableMatrix,
    z1s: Sequence[complex],
    z2s: Sequence[complex],
    decorations: tuple[str, str] = ("G", "G"),
) -> np.ndarray:
    """``<G_1(z1) A1 G_2(z2) A2>`` along a grid of point pairs, O(N^2) per pair."""
    if len(z1s) != len(z2s):
        raise ValueError("z-grids must have equal length")
    f1, f2 = (d in _TRANSPOSED for d in decorations)
    r1 = decomp.rotate(A1, f1, f2)
    r2 = decomp.rotate(A2, f2, f1)
    k1 = np.array([resolvent_kernel(decomp.lambdas, complex(z), decorations[0]) for z in z1s])
    k2 = np.array([resolvent_kernel(decomp.lambdas, complex(z), decorations[1]) for z in z2s])
    return kernels.pair_trace_grid(k1, r1, k2, r2)


# ---------------------------------------------------------------------------
# dense reference


def _dense_factor(H: np.ndarray, z: complex, decoration: str) -> np.ndarray:
    G = np.linalg.inv(H - z * np.eye(H.shape[0]))
    if decoration == "G":
        return G
    if decoration == "adj":
        return G.conj().T
    if decoration == "T":
        return G.T
    im = (G - G.conj().T) / 2j
    return im if decoration == "Im" else im.T


def chain_dense(W: WignerMatrix | np.ndarray, chain: ChainSpec) -> complex:
    """Chain value by explicit inversion and multiplication (test oracle)."""
    H = W.entries if isinstance(W, WignerMatrix) else np.asarray(W, dtype=complex)
    facs = [_dense_factor(H, p.z, d) for p, d in zip(chain.points, chain.decorations)]
    P = facs[0]
    for A, F in zip(chain.observables, facs[1:]):
        P = P @ A.data @ F
    if chain.is_averaged:
        return complex(np.trace(P @ chain.closing.data)) / H.shape[0]
    x, y = chain.vectors
    return complex(np.vdot(x, P @ y))


# ---------------------------------------------------------------------------
# statistics


def ward_residual(decomp: EigenDecomp, z: SpectralPoint | complex) -> float:
    """``|eta <G G*> - <Im G>|``; vanishes up to rounding."""
    z = z.z if isinstance(z, SpectralPoint) else complex(z)
    if z.imag == 0:
        raise ValueError("z must be off the real axis")
    g = 1.0 / (decomp.lambdas - z)
    ggstar = float(np.mean(np.abs(g) ** 2))
    im_g = float(np.mean(g.imag))
    return abs(abs(z.imag) * ggstar - abs(im_g))


def _as_matrix(A) -> ObservableMatrix:
    return A if isinstance(A, ObservableMatrix) else ObservableMatrix(np.asarray(A, dtype=complex))


def max_overlap(decomp: EigenDecomp, A) -> tuple[float, int, int]:
    """``max_ij |<u_i, A u_j> - delta_ij <A>|`` and a maximizing pair."""
    A = _as_matrix(A)
    return kernels.max_overlap_deviation(decomp.rotate(A), A.trace)


def eth_statistic(decomp: EigenDecomp, A) -> float:
    """``sqrt(N) max_ij |<u_i, A u_j> - delta_ij <A>| / <|A_0|^2>^(1/2)``, ``A_0`` the traceless part.

    Multiples of the identity give 0.
    """
    A = _as_matrix(A)
    if not np.any(A.data):
        raise ValueError("eth_statistic is undefined for the zero matrix")
    hs = A.traceless_part().hs_norm
    if hs <= 1e-14 * float(np.sqrt(np.mean(np.abs(A.data) ** 2))):
        return 0.0
    best, _, _ = max_overlap(decomp, A)
    return math.sqrt(decomp.N) * best / hs


def overlap_matrix(decomp: EigenDecomp, A) -> np.ndarray:
    """``|<u_i, A u_j>|^2`` for all pairs."""
    return np.abs(decomp.rotate(_as_matrix(A))) ** 2


def gue_variance_check(samples: Sequence[ChainValue], chain: ChainSpec, *, min_samples: int = 100) -> tuple[float, float]:
    """Empirical size of ``<GAGA> - m^2 <A^2>`` against its predicted scale.

    Returns ``(rms fluctuation, 1/(N eta) <A^2> + sqrt(rho)/(N sqrt(eta)) <A^4>^(1/2))``
    for a two-resolvent chain at a single point with ``A`` Hermitian.
    """
    if len(samples) < min_samples:
        raise ValueError(f"{len(samples)} samples; at least {min_samples} are needed")
    if not chain.is_averaged or chain.k != 2:
        raise ValueError("the variance check needs a k=2 averaged chain")
    p = chain.points[0]
    A = chain.observables[0].data
    N = chain.N
    A2 = A @ A
    a2 = abs(complex(np.trace(A2))) / N
    a4 = abs(complex(np.trace(A2 @ A2))) / N
    predicted = a2 / (N * p.eta) + math.sqrt(p.rho) / (N * math.sqrt(p.eta)) * math.sqrt(a4)
    fl = np.array([s.fluctuation for s in samples])
    return float(np.sqrt(np.mean(np.abs(fl) ** 2))), predicted
