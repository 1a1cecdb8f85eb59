"""Scalar analytic layer for the semicircle law.

Stieltjes transform, density, iterated divided differences (plain and with
selected kernels replaced by their imaginary parts), CDF quantiles and the
``eta(E)`` solver used to place spectral parameters at a fixed local scale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "SpectralPoint",
    "IndexedSpectralSet",
    "msc",
    "msc_derivative",
    "rho_sc",
    "density",
    "divided_difference",
    "divided_difference_recursive",
    "divided_difference_quadrature",
    "cdf",
    "quantile",
    "eta_of_E",
]

SEPARATION = 1e-3
QUAD_ABS_TOL = 1e-11
QUAD_REL_TOL = 1e-13


def msc(z: complex) -> complex:
    """Stieltjes transform of the semicircle law.

    Returns the root of ``m**2 + z*m + 1 = 0`` with ``Im m * Im z > 0``.
    The two roots multiply to one, so the required root is the one of
    modulus below one; it is computed as the reciprocal of the large root to
    avoid cancellation for large ``|z|``.
    """
    z = complex(z)
    if z.imag == 0.0 or not math.isfinite(z.imag) or not math.isfinite(z.real):
        raise ValueError(f"m_sc is undefined on the real axis (z={z!r})")
    s = np.sqrt(z * z - 4.0)
    if (z.conjugate() * s).real < 0:
        s = -s
    big = (-z - s) / 2.0
    m = 1.0 / big
    # one Newton polish on the defining quadratic
    m = m - (m * m + z * m + 1.0) / (2.0 * m + z)
    return complex(m)


def msc_derivative(z: complex) -> complex:
    """d m_sc / dz from implicit differentiation, ``-m / (2m + z)``."""
    m = msc(z)
    return -m / (2.0 * m + z)


def rho_sc(x: float | np.ndarray) -> float | np.ndarray:
    """Semicircle density on the real line."""
    x = np.asarray(x, dtype=float)
    out = np.sqrt(np.clip(4.0 - x * x, 0.0, None)) / (2.0 * np.pi)
    return out if out.ndim else float(out)


def density(z: complex) -> float:
    """``|Im m_sc(z)| / pi``, the smoothed density at ``z``."""
    return abs(msc(z).imag) / math.pi


@dataclass(frozen=True)
class SpectralPoint:
    """A spectral parameter together with its cached semicircle data."""

    z: complex
    eta: float = field(init=False)
    m: complex = field(init=False)
    rho: float = field(init=False)

    def __post_init__(self) -> None:
        z = complex(self.z)
        m = msc(z)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "eta", abs(z.imag))
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "rho", abs(m.imag) / math.pi)

    def conj(self) -> "SpectralPoint":
        return SpectralPoint(self.z.conjugate())


@dataclass(frozen=True)
class IndexedSpectralSet:
    """Ordered spectral points and the indices carrying an ``Im`` kernel."""

    points: tuple[SpectralPoint, ...]
    imag_flags: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        pts = tuple(p if isinstance(p, SpectralPoint) else SpectralPoint(p) for p in self.points)
        if not pts:
            raise ValueError("an indexed spectral set needs at least one point")
        flags = frozenset(int(i) for i in self.imag_flags)
        bad = [i for i in flags if not 0 <= i < len(pts)]
        if bad:
            raise ValueError(f"imag flags {bad} out of range for {len(pts)} points")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "imag_flags", flags)

    @classmethod
    def of(cls, zs: Iterable[complex], imag: Iterable[int] = ()) -> "IndexedSpectralSet":
        return cls(tuple(SpectralPoint(z) for z in zs), frozenset(imag))

    @property
    def zs(self) -> tuple[complex, ...]:
        return tuple(p.z for p in self.points)

    def __len__(self) -> int:
        return len(self.points)


# ---------------------------------------------------------------------------
# divided differences


def _min_gap(zs: Sequence[complex]) -> float:
    gap = math.inf
    for a in range(len(zs)):
        for b in range(a + 1, len(zs)):
            gap = min(gap, abs(zs[a] - zs[b]))
    return gap


def divided_difference_recursive(zs: Sequence[complex]) -> complex:
    """Iterated divided difference of ``m_sc`` by the classical recursion.

    Only accurate when all points are well separated.
    """
    zs = tuple(complex(z) for z in zs)
    if not zs:
        raise ValueError("empty point set")

    @lru_cache(maxsize=None)
    def dd(lo: int, hi: int) -> complex:
        if lo == hi:
            return msc(zs[lo])
        return (dd(lo, hi - 1) - dd(lo + 1, hi)) / (zs[lo] - zs[hi])

    return dd(0, len(zs) - 1)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(20)
_EPS = np.finfo(float).eps


def _kernel_product(anchor: np.ndarray, delta: np.ndarray, zs: Sequence[complex], imag: frozenset[int]) -> np.ndarray:
    # theta = anchor + delta; x - Re z is formed from the cosine difference
    # identity so that nodes next to a peak keep full relative precision
    theta = anchor + delta
    dcos = -4.0 * np.sin(anchor + 0.5 * delta) * np.sin(0.5 * delta)
    base = 2.0 * np.cos(anchor)
    out = (2.0 / np.pi) * np.sin(theta) ** 2 + 0j
    for i, z in enumerate(zs):
        k = 1.0 / (dcos + (base - z.real) - 1j * z.imag)
        out = out * (k.imag if i in imag else k)
    return out


def _panel_rule(anchor: np.ndarray, lo: np.ndarray, hi: np.ndarray, zs, imag) -> np.ndarray:
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    delta = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    vals = _kernel_product(anchor[:, None], delta, zs, imag)
    return half * (vals @ _GL_WEIGHTS)


def _breakpoints(zs: Sequence[complex]) -> np.ndarray:
    pts = {0.0, math.pi}
    for z in zs:
        x = min(max(z.real / 2.0, -1.0), 1.0)
        pts.add(math.acos(x))
    return np.array(sorted(pts))


def divided_difference_quadrature(
    zs: Sequence[complex],
    imag: Iterable[int] = (),
    abs_tol: float = QUAD_ABS_TOL,
    rel_tol: float = QUAD_REL_TOL,
    max_panels: int = 1_000_000,
) -> complex:
    """``int rho_sc(x) prod_i k_i(x) dx`` by adaptive Gauss-Legendre in ``theta``.

    The substitution ``x = 2 cos(theta)`` turns ``rho_sc(x) dx`` into
    ``(2/pi) sin(theta)**2 dtheta`` which removes the square-root edges.
    Kernel ``i`` is ``1/(x - z_i)`` or, for ``i in imag``, its imaginary part.
    Panels are split at the angles of ``Re z_i`` and every panel is stored as
    an offset from its nearest split point.
    """
    zs = tuple(complex(z) for z in zs)
    imag = frozenset(imag)
    if not zs:
        raise ValueError("empty point set")
    if any(z.imag == 0.0 for z in zs):
        raise ValueError("divided differences need points off the real axis")
    bp = _breakpoints(zs)
    half = 0.5 * np.diff(bp)
    keep = half > 0
    left, right, half = bp[:-1][keep], bp[1:][keep], half[keep]
    anchor = np.concatenate([left, right])
    lo = np.concatenate([np.zeros_like(half), -half])
    hi = np.concatenate([half, np.zeros_like(half)])
    coarse = _panel_rule(anchor, lo, hi, zs, imag)
    total = complex(coarse.sum())
    accepted = 0j
    used = len(anchor)
    while len(anchor):
        mid = 0.5 * (lo + hi)
        fl = _panel_rule(anchor, lo, mid, zs, imag)
        fr = _panel_rule(anchor, mid, hi, zs, imag)
        fine = fl + fr
        err = np.abs(fine - coarse)
        tol = max(abs_tol, rel_tol * abs(total))
        # the second bound is a roundoff floor for sharply peaked panels
        ok = (err <= tol * (hi - lo) / math.pi) | (err <= 100 * _EPS * np.abs(fine))
        accepted += complex(fine[ok].sum())
        total = accepted + complex(fine[~ok].sum())
        nok = ~ok
        anchor = np.concatenate([anchor[nok], anchor[nok]])
        lo, hi = np.concatenate([lo[nok], mid[nok]]), np.concatenate([mid[nok], hi[nok]])
        coarse = np.concatenate([fl[nok], fr[nok]])
        used += len(anchor)
        if used > max_panels:
            raise RuntimeError("adaptive quadrature did not converge")
    return accepted


def divided_difference(
    points: IndexedSpectralSet | Sequence[complex],
    imag: Iterable[int] | None = None,
    method: str = "auto",
) -> complex:
    """``m^{(J)}[S]``: semicircle average of a product of resolvent kernels.

    Parameters
    ----------
    points : IndexedSpectralSet or sequence of complex
        The spectral points. If a plain sequence is given, ``imag`` lists the
        positions carrying an ``Im`` kernel.
    method : {"auto", "quadrature", "recursive"}
        ``auto`` uses the recursion only for plain kernels with all gaps above
        ``1e-3`` and quadrature otherwise.
    """
    if isinstance(points, IndexedSpectralSet):
        zs = points.zs
        flags = points.imag_flags if imag is None else frozenset(imag)
    else:
        zs = tuple(complex(z) for z in points)
        flags = frozenset(imag or ())
    if not zs:
        raise ValueError("empty point set")
    if len(zs) == 1:
        m = msc(zs[0])
        return complex(m.imag) if flags else m
    if method == "recursive" or (method == "auto" and not flags and _min_gap(zs) > SEPARATION):
        if flags:
            raise ValueError("the recursion only handles plain kernels")
        return divided_difference_recursive(zs)
    if method not in ("auto", "quadrature"):
        raise ValueError(f"unknown method {method!r}")
    return divided_difference_quadrature(zs, flags)


# ---------------------------------------------------------------------------
# CDF and quantiles


def cdf(x: float) -> float:
    """Semicircle distribution function."""
    if x <= -2.0:
        return 0.0
    if x >= 2.0:
        return 1.0
    return 0.5 + x * math.sqrt(4.0 - x * x) / (4.0 * math.pi) + math.asin(x / 2.0) / math.pi


def _inverse_cdf(p: float, tol: float = 1e-15) -> float:
    if p <= 0.0:
        return -2.0
    if p >= 1.0:
        return 2.0
    lo, hi = -2.0, 2.0
    x = 0.0
    for _ in range(200):
        f = cdf(x) - p
        if f > 0:
            hi = x
        else:
            lo = x
        if abs(f) < tol or hi - lo < 1e-16:
            break
        d = rho_sc(x)
        step = x - f / d if d > 0 else None
        # Newton step only when it stays inside the bracket
        x = step if step is not None and lo < step < hi else 0.5 * (lo + hi)
    return x


def quantile(i: int, N: int) -> float:
    """The ``i``-th ``N``-quantile: ``gamma_i`` with ``F_sc(gamma_i) = i/N``."""
    if N < 1 or not 1 <= i <= N:
        raise ValueError(f"quantile index {i} out of range 1..{N}")
    return _inverse_cdf(i / N)


# ---------------------------------------------------------------------------
# eta(E)


def eta_of_E(E: float, epsilon: float, N: int, rtol: float = 1e-10) -> float:
    """Solve ``N * eta * rho(E + i eta) = N**epsilon`` for ``eta`` by bisection.

    ``eta -> eta * rho(E + i eta)`` is increasing, so the root is unique.
    """
    if not -2.0 <= E <= 2.0:
        raise ValueError(f"E={E} outside [-2, 2]")
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon={epsilon} outside (0, 1)")
    if N < 2:
        raise ValueError("N must be at least 2")
    target = N ** (epsilon - 1.0)

    def g(eta: float) -> float:
        return eta * density(complex(E, eta)) - target

    lo, hi = 1e-8, 10.0
    if g(hi) < 0:
        raise ValueError(f"no eta <= {hi} solves the scale equation at E={E}")
    if g(lo) >= 0:
        return lo
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if g(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
