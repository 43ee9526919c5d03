"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from eaq import _kernels_py

try:
    from eaq import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    r = rng.normal(size=30)
    R = rng.normal(size=(1000, 30))
    L = rng.integers(1, 31, size=1000).astype(np.int64)
    cand, ref = rng.normal(size=(3000, 15)), rng.normal(size=(900, 15))
    acts = rng.integers(0, 8, size=(30000, 3)).astype(np.int64)
    alive = (rng.random((30000, 3)) < 0.9).astype(np.uint8)
    return {
        "discounted_cumsum (T=30)": lambda m: m.discounted_cumsum(r, 0.99),
        "batch_discounted_cumsum (1000x30)": lambda m: m.batch_discounted_cumsum(R, L, 0.99),
        "nearest_distances (3000 vs 900, d=15)": lambda m: m.nearest_distances(cand, ref),
        "focus_fire_counts (30000 steps)": lambda m: m.focus_fire_counts(acts, alive, 5, 3),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled extension not built; only the fallback is available")
    print(f"{'kernel':42s} {'numpy (ms)':>11s} {'cython (ms)':>12s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(0)).items():
        times = {}
        for label, mod in (("py", _kernels_py), ("cy", _kernels)):
            if mod is None:
                continue
            n = 3 if "nearest" in name else 50
            times[label] = min(timeit.repeat(lambda: fn(mod), number=n, repeat=args.repeat)) / n * 1e3
        cy = times.get("cy", float("nan"))
        print(f"{name:42s} {times['py']:11.3f} {cy:12.3f} {times['py'] / cy:7.1f}x")


if __name__ == "__main__":
    main()
