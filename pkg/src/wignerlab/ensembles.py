"""Wigner ensembles, the Ornstein-Uhlenbeck flow and complex moment matching."""
from __future__ import annotations

import cmath
import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "AtomicDistribution",
    "EnsembleParams",
    "WignerMatrix",
    "derive_seed",
    "sample_wigner",
    "ou_evolve",
    "complex_moment",
    "gaussian_moments",
    "match_moments",
    "gaussian_division",
    "gaussian_divisible_law",
]


def derive_seed(seed: int, *keys: int) -> np.random.SeedSequence:
    """Independent child stream for ``(seed, *keys)``; no shared RNG state."""
    digest = hashlib.sha256(repr((int(seed),) + tuple(int(k) for k in keys)).encode()).digest()
    return np.random.SeedSequence(int.from_bytes(digest[:16], "little"))


# ---------------------------------------------------------------------------
# atomic laws


@dataclass(frozen=True, eq=False)
class AtomicDistribution:
    """A finitely supported complex law with at most eleven atoms."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=complex).ravel()
        w = np.asarray(self.weights, dtype=float).ravel()
        if len(pts) != len(w) or not len(pts):
            raise ValueError("points and weights must be nonempty and of equal length")
        if len(pts) > 11:
            raise ValueError(f"{len(pts)} atoms; at most 11 are allowed")
        if (w < -1e-14).any():
            raise ValueError("negative weights")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}")
        w = np.clip(w, 0.0, None)
        w = w / w.sum()
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    def moment(self, i: int, j: int) -> complex:
        """``E[conj(Z)^i Z^j]``."""
        return complex(np.sum(self.weights * np.conj(self.points) ** i * self.points ** j))

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        idx = rng.choice(len(self.points), size=size, p=self.weights)
        return self.points[idx]

    def to_text(self) -> str:
        """One ``re im weight`` triple per line, 17 significant digits."""
        return "".join(f"{p.real:.17g} {p.imag:.17g} {w:.17g}\n" for p, w in zip(self.points, self.weights))

    @classmethod
    def from_text(cls, text: str) -> "AtomicDistribution":
        rows = [line.split() for line in text.splitlines() if line.strip()]
        if any(len(r) != 3 for r in rows):
            raise ValueError("each atom line needs three fields: re im weight")
        pts = [complex(float(r[0]), float(r[1])) for r in rows]
        return cls(np.array(pts), np.array([float(r[2]) for r in rows]))


def complex_moment(samples: np.ndarray, i: int, j: int) -> complex:
    return complex(np.mean(np.conj(samples) ** i * samples ** j))


def gaussian_moments(m02: complex) -> dict[tuple[int, int], complex]:
    """Moments of order <= 3 of the centred complex Gaussian with ``E|xi|^2 = 1``."""
    return {(0, 1): 0j, (1, 1): 1 + 0j, (0, 2): complex(m02), (0, 3): 0j, (1, 2): 0j}


def _complex_gaussian(rng: np.random.Generator, size, sigma: complex) -> np.ndarray:
    # E|xi|^2 = 1 and E xi^2 = sigma
    r = abs(sigma)
    phase = cmath.exp(0.5j * cmath.phase(sigma)) if r > 0 else 1.0
    a = math.sqrt((1 + r) / 2)
    b = math.sqrt((1 - r) / 2)
    return phase * (a * rng.standard_normal(size) + 1j * b * rng.standard_normal(size))


# ---------------------------------------------------------------------------
# moment matching

_LINE_ANGLES = np.array([1, 2, 3, 4]) * np.pi / 4


def _third_moment_system() -> np.ndarray:
    # rows: Re m03, Im m03, Re m12, Im m12 as linear forms in C_1..C_4
    e3 = np.exp(3j * _LINE_ANGLES)
    e1 = np.exp(1j * _LINE_ANGLES)
    return np.array([e3.real, e3.imag, e1.real, e1.imag])


def _line_atoms(phi: float, B: float, C: float) -> tuple[list[complex], list[float]]:
    # two atoms r e^{i phi} and -rh e^{i phi} with p r = ph rh = A, A (r + rh) = B,
    # B (r - rh) = C; taking r rh = 1 makes the line's total weight exactly B
    D = C / B
    s = math.sqrt(D * D + 4.0)
    # take the larger root directly and the other as its reciprocal (no cancellation)
    if D >= 0:
        r = 0.5 * (s + D)
        rh = 1.0 / r
    else:
        rh = 0.5 * (s - D)
        r = 1.0 / rh
    A = B / s
    e = cmath.exp(1j * phi)
    return [r * e, -rh * e], [A / r, A / rh]


def match_moments(m02: complex, m03: complex, m12: complex, *, tol: float = 1e-10) -> AtomicDistribution:
    """A law on at most eleven atoms with prescribed moments up to order three.

    The returned ``Z`` has ``E Z = 0``, ``E|Z|^2 = 1``, ``E Z^2 = m02``,
    ``E Z^3 = m03`` and ``E conj(Z) Z^2 = m12``. Atoms sit at the origin and
    on five lines through it: four at angles ``j*pi/4`` carry the third-order
    data through a 4 x 4 real linear system, the fifth (symmetric, angle
    ``arg(m02)/2``) carries the remaining second-order mass.
    """
    m02, m03, m12 = complex(m02), complex(m03), complex(m12)
    a = abs(m02)
    if a > 1.0 + 1e-12:
        raise ValueError(f"|m02| = {a} exceeds 1")
    if a >= 1.0 - 1e-12:
        return _match_on_line(m02, m03, m12, tol)
    system = _third_moment_system()
    if abs(np.linalg.det(system)) < 1e-12:
        raise np.linalg.LinAlgError("third-moment system is singular")
    C = np.linalg.solve(system, np.array([m03.real, m03.imag, m12.real, m12.imag]))
    beta = (1.0 - a) / 4.0
    pts: list[complex] = []
    wts: list[float] = []
    for phi, c in zip(_LINE_ANGLES, C):
        p, w = _line_atoms(float(phi), beta, float(c))
        pts += p
        wts += w
    if a > 0:
        p, w = _line_atoms(0.5 * cmath.phase(m02), a, 0.0)
        pts += p
        wts += w
    rest = 1.0 - sum(wts)
    if rest < -1e-12:
        raise ArithmeticError("atom weights exceed one")
    if rest > 1e-15:
        pts.append(0j)
        wts.append(rest)
    law = AtomicDistribution(np.array(pts), np.array(wts))
    _check_moments(law, m02, m03, m12, tol)
    return law


def _match_on_line(m02: complex, m03: complex, m12: complex, tol: float) -> AtomicDistribution:
    # |E Z^2| = E|Z|^2 forces Z onto the line through 0 at angle arg(m02)/2
    phi = 0.5 * cmath.phase(m02)
    e = cmath.exp(1j * phi)
    skew = m12 / e
    if abs(skew.imag) > tol or abs(m03 - e ** 3 * skew.real) > tol * max(1.0, abs(m03)):
        raise ValueError("with |m02| = 1 the law lives on a line; m03 and m12 are inconsistent with it")
    s = skew.real
    # two-point law: a - b = s, a b = 1
    r = 0.5 * (s + math.sqrt(s * s + 4.0))
    rh = 1.0 / r
    law = AtomicDistribution(np.array([r * e, -rh * e]), np.array([rh / (r + rh), r / (r + rh)]))
    _check_moments(law, m02, m03, m12, tol)
    return law


def _check_moments(law: AtomicDistribution, m02: complex, m03: complex, m12: complex, tol: float) -> None:
    targets = {(0, 1): 0j, (1, 1): 1 + 0j, (0, 2): m02, (0, 3): m03, (1, 2): m12}
    for (i, j), want in targets.items():
        got = law.moment(i, j)
        if abs(got - want) > tol * max(1.0, abs(want)):
            raise ArithmeticError(f"moment ({i},{j}) residual {abs(got - want):.3g} above tolerance")


def gaussian_division(m02: complex, m03: complex, m12: complex, gamma: float) -> AtomicDistribution:
    """Law of ``Z'`` with ``sqrt(1-gamma) Z' + sqrt(gamma) xi_G`` matching the targets.

    ``xi_G`` is the centred complex Gaussian with ``E|xi|^2 = 1`` and
    ``E xi^2 = m02``; second moments carry over unchanged and third moments
    are rescaled by ``(1-gamma)^(-3/2)``.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma={gamma} outside (0, 1)")
    g = gaussian_moments(m02)
    scale = (1.0 - gamma) ** 1.5
    m03p = (complex(m03) - gamma ** 1.5 * g[(0, 3)]) / scale
    m12p = (complex(m12) - gamma ** 1.5 * g[(1, 2)]) / scale
    m02p = (complex(m02) - gamma * g[(0, 2)]) / (1.0 - gamma)
    return match_moments(m02p, m03p, m12p)


def gaussian_divisible_law(m02: complex, m03: complex, m12: complex, T: float) -> AtomicDistribution:
    """Initial law whose OU evolution to time ``T`` matches the targets to third order.

    The OU update mixes in Gaussian noise with weight ``1 - exp(-T)``.
    """
    return gaussian_division(m02, m03, m12, 1.0 - math.exp(-T))


# ---------------------------------------------------------------------------
# Wigner matrices

_LAWS = ("gaussian", "atomic", "rademacher")


@dataclass(frozen=True, eq=False)
class EnsembleParams:
    """Entry laws of a Wigner matrix.

    ``sigma`` is ``E chi_od^2``; ``diag_second_moment`` is ``E chi_d^2``.
    For ``offdiag_law="atomic"`` the law is given by ``offdiag_atoms`` and
    ``sigma`` is read from it. ``rademacher`` draws ``(+-1 +- i)/sqrt(2)``
    off the diagonal (``sigma = 0``) and ``+-sqrt(diag_second_moment)`` on it.
    """

    N: int
    sigma: complex = 0j
    diag_second_moment: float = 1.0
    offdiag_law: str = "gaussian"
    diag_law: str = "gaussian"
    seed: int = 0
    offdiag_atoms: AtomicDistribution | None = None

    def __post_init__(self) -> None:
        if self.N < 2:
            raise ValueError("N must be at least 2")
        if self.offdiag_law not in _LAWS or self.diag_law not in ("gaussian", "rademacher"):
            raise ValueError(f"unknown law {self.offdiag_law!r}/{self.diag_law!r}")
        sigma = complex(self.sigma)
        if self.offdiag_law == "atomic":
            if self.offdiag_atoms is None:
                raise ValueError("atomic off-diagonal law needs offdiag_atoms")
            law = self.offdiag_atoms
            if abs(law.moment(0, 1)) > 1e-10 or abs(law.moment(1, 1) - 1) > 1e-10:
                raise ValueError("atomic off-diagonal law must be centred with unit variance")
            sigma = law.moment(0, 2)
        elif self.offdiag_law == "rademacher":
            sigma = 0j
        if not abs(sigma) < 1:
            raise ValueError(f"|sigma| = {abs(sigma)} must be below 1")
        if self.diag_second_moment < 0:
            raise ValueError("diag_second_moment must be nonnegative")
        object.__setattr__(self, "sigma", sigma)

    def with_seed(self, seed: int) -> "EnsembleParams":
        return EnsembleParams(self.N, self.sigma, self.diag_second_moment, self.offdiag_law, self.diag_law, seed, self.offdiag_atoms)

    def with_N(self, N: int) -> "EnsembleParams":
        return EnsembleParams(N, self.sigma, self.diag_second_moment, self.offdiag_law, self.diag_law, self.seed, self.offdiag_atoms)


@dataclass(frozen=True, eq=False)
class WignerMatrix:
    entries: np.ndarray
    params: EnsembleParams

    @property
    def N(self) -> int:
        return self.entries.shape[0]


def _assemble(upper: np.ndarray, diag: np.ndarray, N: int) -> np.ndarray:
    # exact Hermitian symmetry: the lower triangle is the bitwise conjugate
    H = np.zeros((N, N), dtype=complex)
    iu = np.triu_indices(N, 1)
    H[iu] = upper
    H[(iu[1], iu[0])] = np.conj(upper)
    H[np.diag_indices(N)] = diag
    return H


def _draw_offdiag(params: EnsembleParams, rng: np.random.Generator, n: int) -> np.ndarray:
    if params.offdiag_law == "gaussian":
        return _complex_gaussian(rng, n, params.sigma)
    if params.offdiag_law == "atomic":
        return params.offdiag_atoms.sample(rng, n)
    signs = rng.integers(0, 2, size=(2, n)) * 2 - 1
    return (signs[0] + 1j * signs[1]) / math.sqrt(2)


def _draw_diag(params: EnsembleParams, rng: np.random.Generator, n: int) -> np.ndarray:
    s = math.sqrt(params.diag_second_moment)
    if params.diag_law == "gaussian":
        return s * rng.standard_normal(n)
    return s * (rng.integers(0, 2, size=n) * 2 - 1)


def sample_wigner(params: EnsembleParams) -> WignerMatrix:
    """One Wigner matrix with entries ``chi / sqrt(N)``; deterministic in the seed."""
    N = params.N
    rng = np.random.default_rng(derive_seed(params.seed, N))
    upper = _draw_offdiag(params, rng, N * (N - 1) // 2)
    diag = _draw_diag(params, rng, N)
    return WignerMatrix(_assemble(upper, diag, N) / math.sqrt(N), params)


def _ou_noise(params: EnsembleParams, rng: np.random.Generator) -> np.ndarray:
    N = params.N
    sigma = params.sigma
    if sigma.imag == 0.0:
        upper = _complex_gaussian(rng, N * (N - 1) // 2, sigma.real)
        diag = math.sqrt(1.0 + sigma.real) * rng.standard_normal(N)
    else:
        # non-real sigma: GUE noise
        upper = _complex_gaussian(rng, N * (N - 1) // 2, 0j)
        diag = rng.standard_normal(N)
    return _assemble(upper, diag, N) / math.sqrt(N)


def ou_evolve(W0: WignerMatrix, t: float, seed: int | None = None) -> WignerMatrix:
    """Exact-in-law OU step ``exp(-t/2) W0 + sqrt(1 - exp(-t)) Xi``.

    ``Xi`` is an independent Gaussian Wigner matrix with off-diagonal
    ``E Xi^2 = sigma / N`` and diagonal variance ``(1 + sigma) / N`` for real
    ``sigma``, GUE otherwise.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    if t == 0.0:
        return W0
    params = W0.params
    rng = np.random.default_rng(derive_seed(params.seed if seed is None else seed, W0.N, 0x0E, int(round(t * 1e12))))
    Xi = _ou_noise(params, rng)
    return WignerMatrix(math.exp(-t / 2) * W0.entries + math.sqrt(-math.expm1(-t)) * Xi, params)
