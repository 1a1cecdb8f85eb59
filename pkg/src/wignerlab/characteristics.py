"""Characteristics of the semicircular flow ``dz/dt = -m(z) - z/2``.

Along a characteristic ``exp(-t/2) m(z_t)`` is constant; the integrator uses
its drift as the error monitor.
"""
from __future__ import annotations

import cmath
import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .det_approx import ChainSpec, ObservableMatrix, m_det_avg
from .semicircle import msc

__all__ = [
    "CharTrajectory",
    "CharacteristicsAbort",
    "ShootingError",
    "AXIS_GUARD",
    "flow_forward",
    "shoot_backward",
    "evolve_points",
    "m_flow_derivative_check",
    "flow_identity_sides",
]

AXIS_GUARD = 1e-8
IM_FLOOR = 1e-3
SHOOT_DIST_CONSTANT = 0.1
TRAJECTORY_COLUMNS = ("t", "re_z", "im_z", "re_m", "im_m", "rho", "conserved_re", "conserved_im")


class CharacteristicsAbort(ArithmeticError):
    """A trajectory came within ``AXIS_GUARD`` of the real axis."""

    def __init__(self, message: str, last_safe_time: float):
        super().__init__(message)
        self.last_safe_time = last_safe_time


class ShootingError(ArithmeticError):
    """Backward shooting missed its target or landed too close to the spectrum."""


@dataclass(frozen=True)
class CharTrajectory:
    times: tuple[float, ...]
    states: tuple[tuple[complex, ...], ...]
    conserved: tuple[tuple[complex, ...], ...]

    @property
    def final(self) -> tuple[complex, ...]:
        return self.states[-1]

    def drift(self) -> float:
        """Largest deviation of the conserved quantity from its initial value."""
        c0 = np.array(self.conserved[0])
        return float(max(np.abs(np.array(c) - c0).max() for c in self.conserved))

    def rows(self, index: int = 0) -> list[tuple[float, ...]]:
        out = []
        for t, zs, cs in zip(self.times, self.states, self.conserved):
            z = zs[index]
            m = msc(z)
            out.append((t, z.real, z.imag, m.real, m.imag, abs(m.imag) / math.pi, cs[index].real, cs[index].imag))
        return out

    def to_csv(self, index: int = 0) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for row in self.rows(index):
            w.writerow([f"{v:.17g}" for v in row])
        return buf.getvalue()


def _field(zs: np.ndarray, direction: float) -> np.ndarray:
    return direction * np.array([-msc(z) - z / 2 for z in zs])


def _rk4(zs: np.ndarray, h: float, direction: float) -> np.ndarray:
    k1 = _field(zs, direction)
    k2 = _field(zs + 0.5 * h * k1, direction)
    k3 = _field(zs + 0.5 * h * k2, direction)
    k4 = _field(zs + h * k3, direction)
    return zs + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _conserved(zs: np.ndarray, t: float, direction: float) -> np.ndarray:
    return np.exp(-direction * t / 2) * np.array([msc(z) for z in zs])


def _eval_noise(zs: np.ndarray) -> np.ndarray:
    # rounding error of m(z): eps |m| plus eps |z| |m'(z)|, with m' = -m / (2m + z)
    m = np.array([msc(z) for z in zs])
    eps = np.finfo(float).eps
    return eps * np.abs(m) * (1.0 + np.abs(zs) / np.abs(2 * m + zs))


def _integrate(z0: Sequence[complex], T: float, tol: float, direction: float, record: bool = True) -> CharTrajectory:
    zs = np.asarray(list(z0), dtype=complex)
    if (zs.imag == 0).any():
        raise ValueError("initial points must be off the real axis")
    if not tol > 0:
        raise ValueError("tol must be positive")
    c0 = _conserved(zs, 0.0, direction)
    # where |Im c0| >= IM_FLOOR, Im drift above the rounding floor is also measured
    # relative to |Im c0| so density ratios along the flow stay accurate
    im_c0 = np.abs(c0.imag)
    rel_weight = np.where(im_c0 >= IM_FLOOR, 1.0 / np.maximum(im_c0, IM_FLOOR), 0.0)

    def error(state: np.ndarray, time: float, floor: np.ndarray) -> float:
        d = _conserved(state, time, direction) - c0
        rel = np.maximum(np.abs(d.imag) - 10 * floor, 0.0) * rel_weight
        return float(np.maximum(np.abs(d), rel).max())

    times, states, cons = [0.0], [tuple(zs)], [tuple(c0)]
    if T == 0:
        return CharTrajectory(tuple(times), tuple(states), tuple(cons))
    t = 0.0
    h = min(T, 0.01)
    floor = _eval_noise(zs)
    prev = 0.0
    while t < T:
        h = min(h, T - t)
        if h < 1e-14 * max(T, 1.0):
            raise CharacteristicsAbort(f"step size underflow at t={t:.6g}", t)
        cand = _rk4(zs, h, direction)
        if (np.abs(cand.imag) < AXIS_GUARD).any() or (np.sign(cand.imag) != np.sign(zs.imag)).any():
            if h > 1e-6 * T:
                h /= 2
                continue
            raise CharacteristicsAbort(f"trajectory reached the real axis after t={t:.6g}", t)
        # cumulative drift allowance grows from tol/2 to tol, so the total stays below tol
        step_floor = np.maximum(floor, _eval_noise(cand))
        drift = error(cand, t + h, step_floor)
        if drift > 0.5 * tol * (1.0 + (t + h) / T):
            if h > 1e-10 * T:
                h /= 2
                continue
            if rel_weight.any():
                # relative Im control is best effort; fall back to the absolute bound
                rel_weight[:] = 0.0
                prev = error(zs, t, floor)
                continue
            raise CharacteristicsAbort(f"drift tolerance {tol:.3g} not attainable at t={t:.6g}", t)
        budget = max(tol * h / T, 10 * float(step_floor.max()))
        zs, floor = cand, step_floor
        t = T if T - (t + h) < 1e-13 * max(T, 1.0) else t + h
        if record or t == T:
            times.append(t)
            states.append(tuple(zs))
            cons.append(tuple(_conserved(zs, t, direction)))
        if drift - prev < budget / 32:
            h *= 2
        prev = drift
    return CharTrajectory(tuple(times), tuple(states), tuple(cons))
    t = 0.0
    h = min(T, 0.01)
    while t < T:
        h = min(h, T - t)
        if h < 1e-14 * max(T, 1.0):
            raise CharacteristicsAbort(f"step size underflow at t={t:.6g}", t)
        cand = _rk4(zs, h, direction)
        if (np.abs(cand.imag) < AXIS_GUARD).any() or (np.sign(cand.imag) != np.sign(zs.imag)).any():
            if h > 1e-6 * T:
                h /= 2
                continue
            raise CharacteristicsAbort(f"trajectory reached the real axis after t={t:.6g}", t)
        # cumulative drift allowance grows from tol/2 to tol, so the total stays below tol
        drift = error(cand, t + h)
        prev = error(zs, t)
        allowance = 0.5 * tol * (1.0 + (t + h) / T)
        if drift > allowance:
            if h > 1e-10 * T:
                h /= 2
                continue
            # the relative Im target is best effort; the absolute bound is not
            if error(cand, t + h, relative=False) > allowance:
                raise CharacteristicsAbort(f"drift tolerance {tol:.3g} not attainable at t={t:.6g}", t)
        budget = max(tol * h / T, 8 * noise)
        zs = cand
        t = T if T - (t + h) < 1e-13 * max(T, 1.0) else t + h
        if record or t == T:
            times.append(t)
            states.append(tuple(zs))
            cons.append(tuple(_conserved(zs, t, direction)))
        if drift - prev < budget / 32:
            h *= 2
    return CharTrajectory(tuple(times), tuple(states), tuple(cons))


def flow_forward(z0: complex | Sequence[complex], T: float, tol: float = 1e-10) -> CharTrajectory:
    """Integrate ``dz/dt = -m(z) - z/2`` from ``z0`` over ``[0, T]`` with RK4.

    Steps are halved while the drift of the conserved quantity
    ``c = exp(-t/2) m(z_t)`` exceeds an allowance growing from ``tol/2`` at
    ``t = 0`` to ``tol`` at ``t = T``. Where ``|Im c_0| >= 1e-3`` the drift
    of ``Im c`` is also measured relative to ``|Im c_0|``, which keeps
    ``rho_T / rho_0`` accurate near the edges; this is dropped, keeping the
    absolute bound, if rounding makes it unattainable.
    """
    if not 0.0 <= T <= 0.9:
        raise ValueError(f"T={T} outside [0, 0.9]")
    pts = [z0] if np.isscalar(z0) else list(z0)
    return _integrate(pts, T, tol, 1.0)


def shoot_backward(z_target: complex, T: float, tol: float = 1e-10, *, max_refine: int = 4) -> complex:
    """Initial point whose forward characteristic reaches ``z_target`` at time ``T``.

    Integrates the reversed field, then checks the round trip to ``10 tol``
    and that the start lies at distance at least ``0.1 T`` from ``[-2, 2]``.
    """
    if z_target.imag == 0:
        raise ValueError("z_target must be off the real axis")
    if not 0.0 < T <= 0.9:
        raise ValueError(f"T={T} outside (0, 0.9]")
    inner = tol
    for _ in range(max_refine):
        z0 = _integrate([z_target], T, inner, -1.0, record=False).final[0]
        back = flow_forward(z0, T, inner).final[0]
        if abs(back - z_target) <= 10 * tol:
            break
        inner /= 10
    else:
        raise ShootingError(f"round trip residual {abs(back - z_target):.3g} above {10 * tol:.3g}")
    dist = _dist_to_support(z0)
    if dist < SHOOT_DIST_CONSTANT * T:
        raise ShootingError(f"dist(z0, [-2, 2]) = {dist:.3g} below {SHOOT_DIST_CONSTANT} * T")
    return z0


def _dist_to_support(z: complex) -> float:
    x = min(max(z.real, -2.0), 2.0)
    return abs(z - x)


def evolve_points(zs: Sequence[complex], dt: float, tol: float = 1e-13) -> tuple[complex, ...]:
    """All points moved along their characteristics by ``dt`` (negative runs backward)."""
    if dt == 0:
        return tuple(complex(z) for z in zs)
    direction = 1.0 if dt > 0 else -1.0
    return _integrate(list(zs), abs(dt), tol, direction, record=False).final


# ---------------------------------------------------------------------------
# time derivative of M along the flow


def _avg_m(points: Sequence[complex], decorations: Sequence[str], inner: Sequence[ObservableMatrix], closing) -> complex:
    return m_det_avg(ChainSpec(tuple(points), tuple(decorations), tuple(inner), closing=closing))


def _segment(zs, obs, i: int, j: int, first: str, last: str, interior: str, ident):
    """``<M_[i,j]>`` with the wrap-around through the closing observable when ``i > j``."""
    k = len(zs)
    idx = list(range(i, j + 1)) if i < j else list(range(i, k)) + list(range(0, j + 1))
    pts = [zs[n] for n in idx]
    decs = [interior] * len(idx)
    decs[0], decs[-1] = first, last
    inner = [obs[n] for n in idx[:-1]]
    return _avg_m(pts, decs, inner, ident)


def flow_identity_sides(zs: Sequence[complex], observables: Sequence, all_imag: bool) -> tuple[complex, complex]:
    """``<M A_k>`` and the right side of its flow identity at the given points.

    Plain chains: ``k/2 <M A_k> + sum_{i<j} <M_[i,j]><M_[j,i]>``. All-Im
    chains add the adjoint/plain endpoint variants of each pair.
    """
    obs = [o if isinstance(o, ObservableMatrix) else ObservableMatrix(o) for o in observables]
    k = len(zs)
    if len(obs) != k:
        raise ValueError("one observable per point is required")
    ident = ObservableMatrix.identity(obs[0].N)
    base = "Im" if all_imag else "G"
    value = _avg_m(zs, [base] * k, obs[:-1], obs[-1])
    rhs = 0.5 * k * value
    for i in range(k):
        for j in range(i + 1, k):
            if not all_imag:
                rhs += _segment(zs, obs, i, j, "G", "G", "G", ident) * _segment(zs, obs, j, i, "G", "G", "G", ident)
                continue
            seg = lambda a, b, f, l: _segment(zs, obs, a, b, f, l, "Im", ident)  # noqa: E731
            rhs += seg(i, j, "Im", "G") * seg(j, i, "Im", "G")
            rhs += seg(i, j, "adj", "Im") * seg(j, i, "adj", "Im")
            rhs += seg(i, j, "Im", "Im") * seg(j, i, "adj", "G")
            rhs += seg(i, j, "adj", "G") * seg(j, i, "Im", "Im")
    return value, rhs


def m_flow_derivative_check(chain: ChainSpec, dt: float = 1e-4) -> float:
    """Relative residual of the flow identity for ``<M A_k>`` by centred differences.

    ``chain`` must be averaged with all decorations ``G`` or all ``Im``.
    """
    if not chain.is_averaged:
        raise ValueError("the flow identity is stated for averaged chains")
    if chain.k > 3:
        raise ValueError(f"chain of length {chain.k} too long; k <= 3 is supported")
    if not 1e-6 <= dt <= 1e-3:
        raise ValueError(f"dt={dt} outside [1e-6, 1e-3]")
    decs = set(chain.decorations)
    if decs not in ({"G"}, {"Im"}):
        raise ValueError("the flow identity needs an all-G or all-Im chain")
    all_imag = decs == {"Im"}
    zs = [p.z for p in chain.points]
    obs = list(chain.all_observables)
    plus, _ = flow_identity_sides(evolve_points(zs, dt), obs, all_imag)
    minus, _ = flow_identity_sides(evolve_points(zs, -dt), obs, all_imag)
    value, rhs = flow_identity_sides(zs, obs, all_imag)
    lhs = (plus - minus) / (2 * dt)
    scale = max(abs(lhs), abs(rhs), abs(value))
    if scale < 1e-14 * math.prod(o.hs_norm for o in obs):
        return 0.0
    return abs(lhs - rhs) / scale
