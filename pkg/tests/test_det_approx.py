from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wignerlab.det_approx import (
    ChainSpec,
    ObservableMatrix,
    cumulant_table,
    leading_term,
    m_bound,
    m_det,
    m_det_avg,
    m_det_iso,
    m_hs_norm_sq,
    m_hs_norm_sq_bound,
    m_matrix,
    partial_trace,
)
from wignerlab.nc_comb import NcPartition, enumerate_nc, kreweras
from wignerlab.semicircle import divided_difference, divided_difference_recursive, msc


def _rand(N, rng, traceless=False, hermitian=False):
    X = rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))
    if hermitian:
        X = (X + X.conj().T) / 2
    if traceless:
        X -= np.trace(X) / N * np.eye(N)
    return X


def _ntr(*mats):
    P = mats[0]
    for A in mats[1:]:
        P = P @ A
    return np.trace(P) / P.shape[0]


ZS = [0.3 + 0.2j, -0.5 + 0.4j, 1.1 - 0.3j, 0.2 + 0.7j, -1.3 - 0.15j]


@pytest.mark.parametrize("seed", range(5))
def test_k2_explicit_formula(seed):
    rng = np.random.default_rng(seed)
    B = _rand(6, rng)
    z1, z2 = ZS[seed % 3], ZS[(seed % 3) + 1]
    m1, m2 = msc(z1), msc(z2)
    trB = np.trace(B) / 6
    want = trB * (divided_difference_recursive([z1, z2]) - m1 * m2) * np.eye(6) + B * m1 * m2
    assert np.abs(m_matrix([z1, z2], [B]) - want).max() < 1e-10
    # second form: integral against the density plus the traceless part
    want2 = trB * divided_difference([z1, z2], method="quadrature") * np.eye(6) + (B - trB * np.eye(6)) * m1 * m2
    assert np.abs(m_matrix([z1, z2], [B]) - want2).max() < 1e-10


def test_k1_is_m_times_identity():
    M = m_matrix([0.2 + 0.5j], [], N=4)
    assert np.allclose(M, msc(0.2 + 0.5j) * np.eye(4))


@given(st.integers(1, 5), st.sets(st.integers(0, 4)), st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_identity_observables_give_divided_difference(k, imag, seed):
    zs = ZS[:k]
    imag = {i for i in imag if i < k}
    chain = ChainSpec.averaged(zs, [np.eye(3)] * k, imag=imag)
    assert abs(m_det_avg(chain) - divided_difference(zs, imag)) < 1e-9


@pytest.mark.parametrize("k", [2, 3, 4])
@pytest.mark.parametrize("imag", [(), (0,), "all"])
def test_matrix_and_trace_routes_agree(k, imag):
    rng = np.random.default_rng(k)
    obs = [_rand(5, rng) for _ in range(k)]
    imag = tuple(range(k)) if imag == "all" else imag
    chain = ChainSpec.averaged(ZS[:k], obs, imag=imag)
    via_matrix = np.trace(m_det(chain) @ obs[-1]) / 5
    assert abs(via_matrix - m_det_avg(chain)) < 1e-11


@pytest.mark.parametrize("k", [1, 2, 3])
def test_isotropic_matches_matrix(k):
    rng = np.random.default_rng(10 + k)
    obs = [_rand(5, rng) for _ in range(k)]
    x = rng.standard_normal(5) + 1j * rng.standard_normal(5)
    y = rng.standard_normal(5) + 1j * rng.standard_normal(5)
    x, y = x / np.linalg.norm(x), y / np.linalg.norm(y)
    chain = ChainSpec.isotropic(ZS[: k + 1], obs, x, y, imag=(0,))
    assert abs(m_det_iso(chain) - np.vdot(x, m_det(chain) @ y)) < 1e-11


def test_leading_term_equals_m_for_k2_traceless():
    rng = np.random.default_rng(3)
    A, B = _rand(8, rng, traceless=True), _rand(8, rng, traceless=True)
    for imag in [(), (0,), (0, 1)]:
        chain = ChainSpec.averaged(ZS[:2], [A, B], imag=imag)
        assert abs(m_det_avg(chain) - leading_term(chain)) < 1e-12


def test_k3_traceless_has_no_correction():
    # every non-trivial partition has a singleton in its Kreweras complement
    for pi in enumerate_nc(3):
        if len(pi) < 3:
            assert any(len(b) == 1 for b in kreweras(pi).blocks)
    rng = np.random.default_rng(4)
    obs = [_rand(6, rng, traceless=True) for _ in range(3)]
    chain = ChainSpec.averaged(ZS[:3], obs, imag=(1,))
    assert abs(m_det_avg(chain) - leading_term(chain)) < 1e-12


def test_k4_traceless_correction_is_pair_cumulant_sum():
    rng = np.random.default_rng(5)
    obs = [_rand(6, rng, traceless=True) for _ in range(4)]
    zs = ZS[:4]
    m = [msc(z) for z in zs]
    chain = ChainSpec.averaged(zs, obs)
    want = 0j
    # a single pair {a, b} with the other points singletons; K must have no singleton
    for a in range(4):
        for b in range(a + 1, 4):
            blocks = [(a, b)] + [(c,) for c in range(4) if c not in (a, b)]
            try:
                pi = NcPartition(4, tuple(blocks))
            except ValueError:
                continue
            K = kreweras(pi)
            if any(len(B) == 1 for B in K.blocks):
                continue
            kappa2 = divided_difference_recursive([zs[a], zs[b]]) - m[a] * m[b]
            term = kappa2 * np.prod([m[c] for c in range(4) if c not in (a, b)])
            for B in K.blocks:
                term *= _ntr(*[obs[j] for j in B])
            want += term
    diff = m_det_avg(chain) - leading_term(chain)
    assert abs(want) > 1e-3
    assert abs(diff - want) < 1e-11


def test_partial_trace_last_block_product():
    rng = np.random.default_rng(6)
    B = [_rand(4, rng) for _ in range(3)]
    pi = NcPartition(4, ((0, 3), (1, 2)))
    assert np.allclose(partial_trace(pi, B), _ntr(B[1], B[2]) * B[0])
    pi = NcPartition(4, ((0, 1, 2), (3,)))
    assert np.allclose(partial_trace(pi, B), _ntr(*B) * np.eye(4))


def test_cumulant_table_first_order():
    t = cumulant_table(ZS[:2], imag=(1,))
    assert t[(0,)] == msc(ZS[0])
    assert t[(1,)] == msc(ZS[1]).imag


def test_bound_report_k2_all_imag():
    rng = np.random.default_rng(7)
    A = ObservableMatrix(_rand(128, rng, traceless=True, hermitian=True))
    zs = [0.1 + 0.05j, -0.2 + 0.08j]
    chain = ChainSpec.averaged(zs, [A, A.adjoint()], imag=(0, 1))
    rep = m_bound(chain)
    rho = [abs(msc(z).imag) / math.pi for z in zs]
    ell = min(z.imag * r for z, r in zip(zs, rho))
    assert rep.ell == pytest.approx(ell)
    assert rep.error_scale == pytest.approx(rho[0] * rho[1] * A.hs_norm ** 2 / math.sqrt(128 * ell))
    assert rep.m_bound == pytest.approx(rho[0] * rho[1] * A.hs_norm ** 2)


def test_bound_warns_outside_regime():
    with pytest.warns(RuntimeWarning):
        m_bound(ChainSpec.averaged([0.1 + 1e-4j], [np.eye(4)]))


def test_hs_norm_bound_dominates_for_traceless():
    rng = np.random.default_rng(8)
    obs = [_rand(8, rng, traceless=True) for _ in range(3)]
    chain = ChainSpec.averaged(ZS[:3], obs)
    assert m_hs_norm_sq(chain) <= 10 * m_hs_norm_sq_bound(chain)


def test_chain_validation():
    with pytest.raises(ValueError):
        ChainSpec.averaged(ZS[:2], [np.eye(2)])
    with pytest.raises(ValueError):
        ChainSpec.averaged(ZS[:2], [np.eye(2)] * 2, decorations=("G", "bogus"))
    with pytest.raises(ValueError):
        ChainSpec.averaged(ZS[:2], [np.eye(2), np.eye(3)])
    with pytest.raises(ValueError):
        ObservableMatrix(np.zeros((2, 3)))


def test_adjoint_decoration_conjugates_point():
    rng = np.random.default_rng(9)
    A = _rand(4, rng)
    chain = ChainSpec.averaged([0.2 + 0.3j, 0.5 + 0.1j], [A, A], decorations=("adj", "G"))
    plain = ChainSpec.averaged([0.2 - 0.3j, 0.5 + 0.1j], [A, A])
    assert m_det_avg(chain) == pytest.approx(m_det_avg(plain), abs=1e-13)
