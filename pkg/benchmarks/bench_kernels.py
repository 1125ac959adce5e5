"""Timing of the compiled kernels against the numpy fallback.

Run ``python3 benchmarks/bench_kernels.py [--repeat N]``. Each kernel is
timed on both backends with the same inputs; outputs are checked to agree
before timings are reported.
"""

import argparse
import math
import timeit

import numpy as np

from dynlsm._kernels import _fallback as fallback

try:
    from dynlsm._kernels import _core as core
except ImportError:  # extension not built
    core = None


def cases(rng):
    n, d = 600, 15
    X = rng.random((n, d))
    y = (X[:, 1] + 0.3 * rng.random(n) > 0.6).astype(np.int64)
    keys = rng.random((2 * n, d))
    mtry = int(math.ceil(math.sqrt(d)))
    tree = core.build_tree(X, y, keys, mtry, 12, 2) if core else fallback.build_tree(X, y, keys, mtry, 12, 2)
    feature, threshold, left, right, c0, c1 = tree
    leaf = (c1 >= c0).astype(np.int64)
    grid = rng.random((40000, d))
    cx, cy = rng.random(40000) * 1000, rng.random(40000) * 1000
    px, py = rng.random(500) * 1000, rng.random(500) * 1000
    seg = rng.random((60, 4)) * 1000
    vals = rng.random((12, 2))
    ring = np.array([[100, 100], [900, 120], [800, 900], [150, 850], [100, 100]], dtype=float)
    return {
        "best_split (600x15)": lambda m: m.best_split(X, y, np.arange(d), 2),
        "build_tree (600x15)": lambda m: m.build_tree(X, y, keys, mtry, 12, 2),
        "forest_votes (40k cells, 1 tree)": lambda m: m.forest_votes(feature, threshold, left, right, leaf, np.array([0]), grid),
        "nearest_point (40k cells, 500 pts)": lambda m: m.nearest_point(cx, cy, px, py),
        "idw (40k cells, 12 stations)": lambda m: m.idw(cx, cy, px[:12], py[:12], vals, 2.0),
        "segment_distance (40k cells, 60 segs)": lambda m: m.segment_distance(cx, cy, seg),
        "points_in_ring (40k cells)": lambda m: m.points_in_ring(cx, cy, ring),
    }


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.allclose(np.asarray(a, dtype=float), np.asarray(b, dtype=float), rtol=1e-12, atol=1e-12)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if core is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':40s} {'cython (ms)':>12s} {'python (ms)':>12s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        if not same(fn(core), fn(fallback)):
            raise SystemExit(f"{name}: backends disagree")
        t_c = min(timeit.repeat(lambda: fn(core), number=1, repeat=args.repeat)) * 1e3
        t_p = min(timeit.repeat(lambda: fn(fallback), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:40s} {t_c:12.2f} {t_p:12.2f} {t_p / t_c:8.1f}x")


if __name__ == "__main__":
    main()
