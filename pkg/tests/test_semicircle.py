from __future__ import annotations

import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wignerlab.semicircle import (
    IndexedSpectralSet,
    SpectralPoint,
    cdf,
    density,
    divided_difference,
    divided_difference_quadrature,
    divided_difference_recursive,
    eta_of_E,
    msc,
    msc_derivative,
    quantile,
    rho_sc,
)

# reference values from a 30-digit mpmath evaluation of the closed form / quadrature
MSC_ORACLE = [
    (1j, 0.6180339887498949j),
    (0.5 + 0.1j, -0.23710837400499216 + 0.9196216757172847j),
    (-1.7 + 0.01j, 0.8419334660189259 + 0.5218681703903434j),
    (2.5 - 0.3j, -0.4762305866654027 - 0.09232025299625057j),
    (3j, 0.3027756377319947j),
    (100j, 0.009999000199950014j),
    (1e-3 + 1e-6j, -0.0004999997499999688 + 0.9999993750001172j),
]

DD_ORACLE = [
    ([0.3 + 0.2j, -0.5 + 0.4j], (), -0.42396261949890723 + 0.023846544958989586j),
    ([0.3 + 0.2j, -0.5 + 0.4j, 1.1 - 0.3j], (), 0.9193095267962371 - 0.6222064629037605j),
    ([0.3 + 0.2j, -0.5 + 0.4j], (0, 1), 0.5833670404406376 + 0j),
    ([0.3 + 0.2j, -0.5 + 0.4j, 1.1 - 0.3j], (1,), 0.6709000672787868 - 0.5620872702062627j),
]

off_axis = st.complex_numbers(max_magnitude=6, allow_nan=False, allow_infinity=False).filter(lambda z: abs(z.imag) > 1e-3)


@pytest.mark.parametrize("z, want", MSC_ORACLE)
def test_msc_matches_reference(z, want):
    assert abs(msc(z) - want) <= 1e-13 * max(1.0, abs(want))


def test_msc_far_field_is_minus_inverse_z():
    # m ~ -1/z; at z = 100i this is +0.01i
    assert abs(msc(100j) - (-1 / 100j)) < 2e-6
    assert msc(100j).imag > 0


@given(off_axis)
@settings(max_examples=200, deadline=None)
def test_msc_solves_quadratic_on_correct_branch(z):
    m = msc(z)
    assert abs(m * m + z * m + 1) < 1e-12 * max(1.0, abs(z))
    assert m.imag * z.imag > 0
    assert abs(m) < 1


@given(off_axis)
@settings(max_examples=100, deadline=None)
def test_msc_conjugate_symmetry(z):
    assert abs(msc(z.conjugate()) - msc(z).conjugate()) < 1e-14


def test_msc_rejects_real_axis():
    with pytest.raises(ValueError):
        msc(0.5)


def test_msc_derivative_finite_difference():
    z, h = 0.4 + 0.3j, 1e-6
    fd = (msc(z + h) - msc(z - h)) / (2 * h)
    assert abs(msc_derivative(z) - fd) < 1e-8


def test_rho_and_density():
    assert rho_sc(0.0) == pytest.approx(1 / math.pi)
    assert rho_sc(3.0) == 0.0
    assert density(0.7 + 1e-9j) == pytest.approx(float(rho_sc(0.7)), rel=1e-7)


@pytest.mark.parametrize("zs, imag, want", DD_ORACLE)
def test_divided_difference_reference(zs, imag, want):
    assert abs(divided_difference(zs, imag) - want) < 1e-11


def test_divided_difference_single_point():
    z = 0.2 + 0.3j
    assert divided_difference([z]) == msc(z)
    assert divided_difference([z], [0]) == msc(z).imag


def test_divided_difference_coincident_points_is_derivative():
    z = 0.3 + 0.2j
    assert abs(divided_difference([z, z], method="quadrature") - msc_derivative(z)) < 1e-10


def test_divided_difference_near_axis_stays_accurate():
    # close to the spectrum the integrand has size 1/eta; two routes must still agree
    zs = [0.1 + 1e-4j, 0.4 - 2e-4j]
    q = divided_difference_quadrature(zs)
    r = divided_difference_recursive(zs)
    assert abs(q - r) <= 1e-9 * abs(r)


@given(st.lists(st.tuples(st.floats(-2.5, 2.5), st.floats(0.1, 2.0), st.booleans()), min_size=2, max_size=4))
@settings(max_examples=30, deadline=None)
def test_recursion_and_quadrature_agree(specs):
    zs = [complex(x, y if up else -y) for x, y, up in specs]
    gaps = [abs(a - b) for i, a in enumerate(zs) for b in zs[i + 1:]]
    if min(gaps) < 0.05:
        return
    r = divided_difference_recursive(zs)
    q = divided_difference_quadrature(zs)
    assert abs(r - q) <= 1e-8 * max(1.0, abs(r))


def test_indexed_set_validation():
    s = IndexedSpectralSet.of([0.1 + 0.2j, 0.3 + 0.1j], [1])
    assert s.zs == (0.1 + 0.2j, 0.3 + 0.1j)
    with pytest.raises(ValueError):
        IndexedSpectralSet.of([0.1 + 0.2j], [3])
    p = SpectralPoint(0.5 + 0.1j)
    assert p.rho == pytest.approx(abs(msc(0.5 + 0.1j).imag) / math.pi)
    assert p.conj().z == 0.5 - 0.1j


@pytest.mark.parametrize("i, N, want", [(1, 10, -1.3740976522650812), (5, 10, 0.0), (7, 10, 0.6393830195810077), (100, 101, 1.8695401425497267)])
def test_quantile_reference(i, N, want):
    assert quantile(i, N) == pytest.approx(want, abs=1e-12)


def test_quantile_endpoints_and_errors():
    assert quantile(10, 10) == 2.0
    with pytest.raises(ValueError):
        quantile(0, 10)
    assert cdf(-3) == 0.0 and cdf(3) == 1.0


@given(st.integers(2, 400), st.data())
@settings(max_examples=50, deadline=None)
def test_quantiles_increase_and_invert_cdf(N, data):
    i = data.draw(st.integers(1, N - 1))
    g = quantile(i, N)
    assert abs(cdf(g) - i / N) < 1e-12
    assert quantile(i + 1, N) > g


@pytest.mark.parametrize("E, want", [(0.0, 0.066976578716687), (1.5, 0.10559342989165024), (2.0, 0.2655638462468702)])
def test_eta_of_E_reference(E, want):
    assert eta_of_E(E, 0.3, 256) == pytest.approx(want, rel=1e-9)


def test_eta_of_E_solves_scale_equation():
    eta = eta_of_E(1.9, 0.5, 1000)
    assert 1000 * eta * density(complex(1.9, eta)) == pytest.approx(1000 ** 0.5, rel=1e-9)
    with pytest.raises(ValueError):
        eta_of_E(2.5, 0.3, 100)
