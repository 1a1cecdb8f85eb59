from __future__ import annotations

from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wignerlab.nc_comb import (
    CumulantTable,
    NcPartition,
    catalan,
    elements_of,
    enumerate_nc,
    free_cumulants,
    free_cumulants_mobius,
    is_noncrossing,
    kreweras,
    mask_of,
    nc_of_subset,
    resum_moments,
)


def _catalan_recurrence(n: int) -> list[int]:
    c = [1]
    for m in range(n):
        c.append(sum(c[i] * c[m - i] for i in range(m + 1)))
    return c


def _brute_nc_count(k: int) -> int:
    # restricted growth strings filtered by the crossing test
    count = 0
    for labels in product(range(k), repeat=k):
        if labels[0] != 0 or any(labels[i] > max(labels[:i]) + 1 for i in range(1, k)):
            continue
        blocks = {}
        for e, l in enumerate(labels):
            blocks.setdefault(l, []).append(e)
        count += is_noncrossing(list(blocks.values()))
    return count


def _rotate(p: NcPartition, s: int) -> NcPartition:
    return NcPartition(p.k, tuple(tuple((e + s) % p.k for e in b) for b in p.blocks))


@pytest.mark.parametrize("k", range(1, 11))
def test_enumeration_counts_are_catalan(k):
    parts = enumerate_nc(k)
    assert len(parts) == _catalan_recurrence(k)[k] == catalan(k)
    assert len({p.blocks for p in parts}) == len(parts)


@pytest.mark.parametrize("k", range(1, 7))
def test_enumeration_matches_brute_force(k):
    assert len(enumerate_nc(k)) == _brute_nc_count(k)


def test_crossing_partition_rejected():
    assert not is_noncrossing([(0, 2), (1, 3)])
    with pytest.raises(ValueError):
        NcPartition(4, ((0, 2), (1, 3)))
    with pytest.raises(ValueError):
        NcPartition(3, ((0, 1),))


def test_kreweras_example():
    assert kreweras(NcPartition(3, ((0, 1), (2,)))).blocks == ((0,), (1, 2))
    assert kreweras(NcPartition(4, ((0,), (1,), (2,), (3,)))).blocks == ((0, 1, 2, 3),)


@pytest.mark.parametrize("k", range(1, 8))
def test_kreweras_block_count_and_bijection(k):
    parts = enumerate_nc(k)
    images = [kreweras(p) for p in parts]
    assert all(len(p) + len(q) == k + 1 for p, q in zip(parts, images))
    assert len({q.blocks for q in images}) == len(parts)


@pytest.mark.parametrize("k", range(1, 8))
def test_kreweras_squared_is_rotation(k):
    for p in enumerate_nc(k):
        assert kreweras(kreweras(p)).blocks == _rotate(p, -1).blocks


def test_masks_roundtrip():
    assert elements_of(mask_of([0, 3, 4])) == (0, 3, 4)


def test_nc_of_subset_relabels():
    out = nc_of_subset(mask_of([1, 3, 4]))
    assert len(out) == 5
    assert all(sum(bin(b).count("1") for b in blocks) == 3 for blocks in out)


def _random_table(k: int, rng) -> CumulantTable:
    return CumulantTable(k, {s: complex(*rng.standard_normal(2)) for s in range(1, 1 << k)})


@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_free_cumulant_round_trip(k, seed):
    m = _random_table(k, np.random.default_rng(seed))
    kappa = free_cumulants(m)
    back = resum_moments(kappa)
    assert max(abs(back[s] - m[s]) for s in range(1, 1 << k)) < 1e-12
    mob = free_cumulants_mobius(m)
    assert max(abs(mob[s] - kappa[s]) for s in range(1, 1 << k)) < 1e-11


def test_semicircle_moments_have_single_free_cumulant():
    # moments of the semicircle law: Catalan numbers at even order; only kappa_2 = 1 survives
    k = 6
    cat = {n: catalan(n // 2) if n % 2 == 0 else 0 for n in range(1, k + 1)}
    m = CumulantTable.from_function(k, lambda e: cat[len(e)])
    kappa = free_cumulants(m)
    for s in range(1, 1 << k):
        want = 1 if bin(s).count("1") == 2 else 0
        assert abs(kappa[s] - want) < 1e-12


def test_table_must_be_complete():
    with pytest.raises(ValueError):
        CumulantTable(2, {1: 1, 2: 1})


def test_free_cumulants_size_limit():
    with pytest.raises(ValueError):
        free_cumulants(CumulantTable(9, {s: 0 for s in range(1, 1 << 9)}))
