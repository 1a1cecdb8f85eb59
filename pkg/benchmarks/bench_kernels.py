"""Compare the compiled and numpy kernel backends.

Usage: python benchmarks/bench_kernels.py [--N 1024] [--repeat 5]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from wignerlab import _pykernels

try:
    from wignerlab import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _inputs(N: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    U = np.linalg.qr(rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N)))[0]
    A = rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))
    rot = U.conj().T @ (A + A.conj().T) @ U
    k1 = 1.0 / (rng.standard_normal(N) - 0.1j)
    k2 = 1.0 / (rng.standard_normal(N) - 0.2j)
    return k1, rot, k2, rot.conj().T.copy()


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--N", type=int, default=1024)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    k1, a1, k2, a2 = _inputs(args.N)
    K1 = np.stack([k1, k1 * 0.5])
    K2 = np.stack([k2, k2 * 2.0])
    cases = {
        "pair_trace": lambda m: m.pair_trace(k1, a1, k2, a2),
        "pair_trace_grid": lambda m: m.pair_trace_grid(K1, a1, K2, a2),
        "max_overlap_deviation": lambda m: m.max_overlap_deviation(a1, 0.1 + 0j),
    }
    backends = {"python": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    print(f"N={args.N}, best of {args.repeat}")
    print(f"{'kernel':<24}" + "".join(f"{b:>12}" for b in backends) + f"{'max |diff|':>14}")
    for name, fn in cases.items():
        times = [min(timeit.repeat(lambda: fn(m), number=1, repeat=args.repeat)) for m in backends.values()]
        outs = [np.asarray(fn(m), dtype=object if name == "max_overlap_deviation" else complex) for m in backends.values()]
        if len(outs) == 2:
            if name == "max_overlap_deviation":
                diff = abs(float(outs[0][0]) - float(outs[1][0]))
            else:
                diff = float(np.max(np.abs(outs[0] - outs[1])))
            dtxt = f"{diff:14.2e}"
        else:
            dtxt = f"{'n/a':>14}"
        print(f"{name:<24}" + "".join(f"{t * 1e3:10.2f}ms" for t in times) + dtxt)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
