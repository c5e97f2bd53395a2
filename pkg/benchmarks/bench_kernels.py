"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 3]

Prints one line per kernel with the best wall time of each backend and the
speedup. Outputs of the two backends are checked for agreement first.
"""

import argparse
import math
import time

import numpy as np

from libragrad import _kernels
from libragrad.rng import Rng


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases():
    state = Rng(0).state.copy()
    img = Rng(1).normal((14, 14))
    table = Rng(2).uniform((1 << 8,)) * 100

    def normal(mod):
        out = np.empty(200_000)
        return lambda: mod.xoshiro_normal_fill(state.copy(), out)

    def uniform(mod):
        out = np.empty(200_000)
        return lambda: mod.xoshiro_uniform_fill(state.copy(), out)

    return [
        ("xoshiro normal x200k", normal, lambda m: _fill(m.xoshiro_normal_fill, state, 1000)),
        ("xoshiro uniform x200k", uniform, lambda m: _fill(m.xoshiro_uniform_fill, state, 1000)),
        ("bicubic 14x14 x16", lambda m: (lambda: m.bicubic_upsample(img, 16)),
         lambda m: m.bicubic_upsample(img, 16)),
        (f"ordering AUCs 8! = {math.factorial(8)}", lambda m: (lambda: m.ordering_aucs(table, 8)),
         lambda m: m.ordering_aucs(table, 8)),
    ]


def _fill(fn, state, n):
    out = np.empty(n)
    fn(state.copy(), out)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    cy, py = _kernels.compiled, _kernels.python
    if cy is None:
        print("compiled kernels not available; build with `pip install -e . --no-build-isolation`")
        return 1
    print(f"{'kernel':<28}{'python s':>12}{'cython s':>12}{'speedup':>10}")
    for name, make, check in cases():
        np.testing.assert_allclose(check(cy), check(py), rtol=0, atol=1e-12)
        tp, tc = best_of(make(py), args.repeat), best_of(make(cy), args.repeat)
        print(f"{name:<28}{tp:>12.4f}{tc:>12.4f}{tp / tc:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
