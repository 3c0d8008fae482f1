"""Compare the compiled and numpy kernel backends on the forward-model hot loops.

Usage: python3 benchmarks/bench_kernels.py [--repeat R]
"""
import argparse
import timeit

import numpy as np

from varreg import _pykernels

try:
    from varreg import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None


def cases(rng):
    for n, m in ((8, 64), (64, 1024), (256, 2**14)):
        a = rng.uniform(0.5, 2.0, n)
        q = rng.standard_normal(m)
        k = m - 1
        lo, up = -np.ones(k - 1), -np.ones(k - 1)
        d, b = 2.5 * np.ones(k), rng.standard_normal(k)
        yield f"overlap_means n={n} m={m}", lambda impl, a=a, m=m: impl.overlap_means(a, m)
        yield f"overlap_accumulate n={n} m={m}", lambda impl, q=q, n=n: impl.overlap_accumulate(q, n)
        yield f"tridiag_solve k={k}", lambda impl, lo=lo, d=d, up=up, b=b: impl.tridiag_solve(lo, d, up, b)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=200)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    backends = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"{'kernel':40s}" + "".join(f"{name:>14s}" for name, _ in backends) + "   speedup")
    for label, fn in cases(rng):
        times = [min(timeit.repeat(lambda: fn(impl), number=args.repeat, repeat=3)) / args.repeat
                 for _, impl in backends]
        speed = f"{times[0] / times[1]:8.1f}x" if len(times) > 1 else ""
        print(f"{label:40s}" + "".join(f"{t * 1e6:12.1f}us" for t in times) + "   " + speed)


if __name__ == "__main__":
    main()
