"""Non-crossing partitions, Kreweras complements and free cumulants.

Ground sets are ``{0, ..., k-1}`` in cyclic order. Subsets are bitmasks.
"""
from __future__ import annotations

import math
from itertools import combinations, product
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Sequence

__all__ = [
    "NcPartition",
    "CumulantTable",
    "enumerate_nc",
    "nc_of_subset",
    "kreweras",
    "catalan",
    "is_noncrossing",
    "free_cumulants",
    "free_cumulants_mobius",
    "resum_moments",
    "mask_of",
    "elements_of",
]

MAX_K = 12


def mask_of(elements: Iterable[int]) -> int:
    mask = 0
    for e in elements:
        mask |= 1 << e
    return mask


def elements_of(mask: int) -> tuple[int, ...]:
    out = []
    i = 0
    while mask:
        if mask & 1:
            out.append(i)
        mask >>= 1
        i += 1
    return tuple(out)


def is_noncrossing(blocks: Sequence[Sequence[int]]) -> bool:
    """True if no ``a < b < c < d`` has ``a, c`` and ``b, d`` in two different blocks."""
    label = {}
    for n, block in enumerate(blocks):
        for e in block:
            label[e] = n
    elems = sorted(label)
    for ia, a in enumerate(elems):
        for ib in range(ia + 1, len(elems)):
            b = elems[ib]
            if label[b] == label[a]:
                continue
            for ic in range(ib + 1, len(elems)):
                c = elems[ic]
                if label[c] != label[a]:
                    continue
                for d in elems[ic + 1:]:
                    if label[d] == label[b]:
                        return False
    return True


@dataclass(frozen=True)
class NcPartition:
    """A non-crossing partition of ``{0, ..., k-1}``.

    Blocks are sorted tuples ordered by their smallest element.
    """

    k: int
    blocks: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        blocks = tuple(sorted((tuple(sorted(b)) for b in self.blocks), key=lambda b: b[0]))
        seen = [e for b in blocks for e in b]
        if sorted(seen) != list(range(self.k)) or any(not b for b in blocks):
            raise ValueError(f"blocks {blocks} do not partition range({self.k})")
        if not is_noncrossing(blocks):
            raise ValueError(f"blocks {blocks} are crossing")
        object.__setattr__(self, "blocks", blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def block_of(self, e: int) -> tuple[int, ...]:
        for b in self.blocks:
            if e in b:
                return b
        raise KeyError(e)

    def labels(self) -> tuple[int, ...]:
        """Block-membership vector (restricted growth string)."""
        out = [0] * self.k
        for n, b in enumerate(self.blocks):
            for e in b:
                out[e] = n
        return tuple(out)

    def masks(self) -> tuple[int, ...]:
        return tuple(mask_of(b) for b in self.blocks)

    def as_permutation(self) -> tuple[int, ...]:
        """Each block as a cycle in increasing order."""
        perm = list(range(self.k))
        for b in self.blocks:
            for n, e in enumerate(b):
                perm[e] = b[(n + 1) % len(b)]
        return tuple(perm)

    @classmethod
    def from_labels(cls, labels: Sequence[int], *, validate: bool = True) -> "NcPartition":
        groups: dict[int, list[int]] = {}
        for e, lab in enumerate(labels):
            groups.setdefault(lab, []).append(e)
        blocks = tuple(tuple(g) for g in groups.values())
        if validate:
            return cls(len(labels), blocks)
        # generated partitions are non-crossing by construction
        obj = object.__new__(cls)
        object.__setattr__(obj, "k", len(labels))
        object.__setattr__(obj, "blocks", tuple(sorted(blocks, key=lambda b: b[0])))
        return obj


def _nc_label_vectors(k: int) -> list[tuple[int, ...]]:
    # the block of the first element splits the rest into independent gaps
    @lru_cache(maxsize=None)
    def parts(lo: int, hi: int) -> tuple[tuple[tuple[int, ...], ...], ...]:
        # all NC partitions of the interval [lo, hi) as tuples of blocks
        if lo >= hi:
            return ((),)
        out = []
        rest = list(range(lo + 1, hi))
        for r in range(len(rest) + 1):
            for others in combinations(rest, r):
                block = (lo,) + others
                bounds = list(block) + [hi]
                gap_options = [parts(bounds[n] + 1, bounds[n + 1]) for n in range(len(block))]
                for choice in product(*gap_options):
                    out.append((block,) + tuple(b for g in choice for b in g))
        return tuple(out)

    labels = []
    for blocks in parts(0, k):
        lab = [0] * k
        for n, b in enumerate(sorted(blocks, key=lambda b: b[0])):
            for e in b:
                lab[e] = n
        labels.append(tuple(lab))
    labels.sort()
    return labels


@lru_cache(maxsize=None)
def _enumerate_cached(k: int) -> tuple[NcPartition, ...]:
    return tuple(NcPartition.from_labels(lab, validate=False) for lab in _nc_label_vectors(k))


def enumerate_nc(k: int) -> list[NcPartition]:
    """All non-crossing partitions of ``{0, ..., k-1}``.

    Ordered lexicographically by the block-membership vector; the count is
    ``catalan(k)``.
    """
    if not 1 <= k <= MAX_K:
        raise ValueError(f"k={k} outside 1..{MAX_K}")
    return list(_enumerate_cached(k))


@lru_cache(maxsize=None)
def nc_of_subset(mask: int) -> tuple[tuple[int, ...], ...]:
    """NC partitions of the ordered subset ``mask``, each as a tuple of block masks."""
    elems = elements_of(mask)
    if not elems:
        return ((),)
    out = []
    for p in _enumerate_cached(len(elems)):
        out.append(tuple(mask_of(elems[e] for e in b) for b in p.blocks))
    return tuple(out)


def kreweras(pi: NcPartition) -> NcPartition:
    """Kreweras complement, with the barred copy of ``i`` placed right after ``i``.

    Computed as the permutation ``pi^{-1} o gamma`` where ``gamma`` is the
    cyclic shift ``i -> i+1``; its cycles are the complement's blocks.
    """
    k = pi.k
    perm = pi.as_permutation()
    inv = [0] * k
    for i, j in enumerate(perm):
        inv[j] = i
    kperm = [inv[(i + 1) % k] for i in range(k)]
    blocks = []
    seen = [False] * k
    for start in range(k):
        if seen[start]:
            continue
        cyc = []
        e = start
        while not seen[e]:
            seen[e] = True
            cyc.append(e)
            e = kperm[e]
        blocks.append(tuple(cyc))
    return NcPartition(k, tuple(blocks))


def catalan(n: int) -> int:
    """Exact Catalan number ``C_n`` for ``0 <= n <= 30``."""
    if not 0 <= n <= 30:
        raise ValueError(f"catalan({n}) outside the supported range 0..30")
    return math.comb(2 * n, n) // (n + 1)


# ---------------------------------------------------------------------------
# free cumulants


@dataclass
class CumulantTable:
    """Values on all nonempty subsets of ``{0, ..., k-1}``, keyed by bitmask."""

    k: int
    values: dict[int, complex]

    def __post_init__(self) -> None:
        full = (1 << self.k) - 1
        missing = [s for s in range(1, full + 1) if s not in self.values]
        if missing:
            raise ValueError(f"table incomplete: {len(missing)} subsets missing, e.g. {elements_of(missing[0])}")

    @classmethod
    def from_function(cls, k: int, fn: Callable[[tuple[int, ...]], complex]) -> "CumulantTable":
        return cls(k, {s: complex(fn(elements_of(s))) for s in range(1, 1 << k)})

    def __getitem__(self, subset: int | Iterable[int]) -> complex:
        if not isinstance(subset, int):
            subset = mask_of(subset)
        return self.values[subset]


def _submasks_containing(mask: int, low: int) -> Iterable[int]:
    rest = mask & ~low
    sub = rest
    while True:
        yield sub | low
        if sub == 0:
            return
        sub = (sub - 1) & rest


def _gap_masks(S: int, V: int) -> list[int]:
    # elements of S strictly between consecutive elements of V (V contains min S)
    elems = elements_of(S)
    gaps = []
    cur = 0
    started = False
    for e in elems:
        if V >> e & 1:
            if started and cur:
                gaps.append(cur)
            cur = 0
            started = True
        else:
            cur |= 1 << e
    if cur:
        gaps.append(cur)
    return gaps


def free_cumulants(m_table: CumulantTable) -> CumulantTable:
    """Free-cumulant transform by recursion on the block of the first element.

    Uses ``m[S] = sum_{V containing min S} kappa[V] * prod_gaps m[gap]``.
    """
    k = m_table.k
    if k > 8:
        raise ValueError("free cumulant tables are supported up to k = 8")
    m = m_table.values
    kappa: dict[int, complex] = {}
    for S in sorted(range(1, 1 << k), key=lambda s: bin(s).count("1")):
        low = S & -S
        acc = m[S]
        for V in _submasks_containing(S, low):
            if V == S:
                continue
            term = kappa[V]
            for g in _gap_masks(S, V):
                term *= m[g]
            acc -= term
        kappa[S] = acc
    return CumulantTable(k, kappa)


def free_cumulants_mobius(m_table: CumulantTable) -> CumulantTable:
    """Free cumulants from the explicit Catalan-weighted Moebius formula."""
    k = m_table.k
    if k > 8:
        raise ValueError("free cumulant tables are supported up to k = 8")
    m = m_table.values
    out = {}
    for S in range(1, 1 << k):
        elems = elements_of(S)
        n = len(elems)
        acc = 0j
        for p in _enumerate_cached(n):
            weight = 1
            for T in kreweras(p).blocks:
                weight *= catalan(len(T) - 1)
            term = (-1) ** (len(p) - 1) * weight
            for b in p.blocks:
                term *= m[mask_of(elems[e] for e in b)]
            acc += term
        out[S] = acc
    return CumulantTable(k, out)


def resum_moments(kappa: CumulantTable) -> CumulantTable:
    """Direct sum over NC(S) of cumulant products (inverse of ``free_cumulants``)."""
    out = {}
    for S in range(1, 1 << kappa.k):
        acc = 0j
        for blocks in nc_of_subset(S):
            term = 1 + 0j
            for b in blocks:
                term *= kappa.values[b]
            acc += term
        out[S] = acc
    return CumulantTable(kappa.k, out)
