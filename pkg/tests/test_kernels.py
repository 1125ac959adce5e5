"""Both kernel backends against brute-force references and each other."""

import math

import numpy as np
import pytest

from dynlsm._kernels import core, fallback

BACKENDS = [fallback] + ([core] if core is not None else [])


def brute_nearest(cx, cy, px, py):
    idx, d2 = [], []
    for x, y in zip(cx, cy):
        ds = [(x - a) ** 2 + (y - b) ** 2 for a, b in zip(px, py)]
        k = min(range(len(ds)), key=lambda i: (ds[i], i))
        idx.append(k)
        d2.append(ds[k])
    return np.array(idx), np.array(d2)


def brute_segment(x, y, seg):
    best = math.inf
    for x0, y0, x1, y1 in seg:
        # sample the segment finely then refine analytically via projection
        ex, ey = x1 - x0, y1 - y0
        L2 = ex * ex + ey * ey
        t = 0.0 if L2 == 0 else max(0.0, min(1.0, ((x - x0) * ex + (y - y0) * ey) / L2))
        best = min(best, math.hypot(x - (x0 + t * ex), y - (y0 + t * ey)))
    return best


@pytest.mark.parametrize("k", BACKENDS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
class TestBackend:
    def test_nearest_point(self, k, rng):
        cx, cy = rng.integers(0, 20, 300).astype(float), rng.integers(0, 20, 300).astype(float)
        px, py = rng.integers(0, 20, 15).astype(float), rng.integers(0, 20, 15).astype(float)
        idx, d2 = k.nearest_point(cx, cy, px, py)
        ridx, rd2 = brute_nearest(cx, cy, px, py)
        np.testing.assert_array_equal(idx, ridx)
        np.testing.assert_array_equal(d2, rd2)

    def test_segment_distance_examples(self, k):
        seg = np.array([[0.0, 0.0, 10.0, 0.0]])
        d = k.segment_distance(np.array([0.0, -3.0, 4.0]), np.array([5.0, 4.0, 0.0]), seg)
        assert d.tolist() == [5.0, 5.0, 0.0]

    def test_segment_distance_random(self, k, rng):
        seg = rng.uniform(0, 100, (12, 4))
        seg[3, 2:] = seg[3, :2]  # zero-length segment
        px, py = rng.uniform(-20, 120, 50), rng.uniform(-20, 120, 50)
        d = k.segment_distance(px, py, seg)
        ref = [brute_segment(x, y, seg) for x, y in zip(px, py)]
        np.testing.assert_allclose(d, ref, rtol=1e-12, atol=1e-12)

    def test_idw(self, k):
        sx, sy = np.array([0.0, 10.0]), np.array([0.0, 0.0])
        vals = np.array([[100.0, 1.0], [300.0, 5.0]])
        out = k.idw(np.array([5.0, 0.0, 3.0]), np.array([0.0, 0.0, 4.0]), sx, sy, vals, 2.0)
        assert out[0].tolist() == [200.0, 3.0]
        assert out[1].tolist() == [100.0, 1.0]
        w1, w2 = 1 / 25.0, 1 / (49.0 + 16.0)
        assert out[2, 0] == pytest.approx((w1 * 100 + w2 * 300) / (w1 + w2), rel=1e-14)

    def test_points_in_ring(self, k):
        ring = np.array([[0, 0], [10, 0], [10, 10], [5, 4], [0, 10]], dtype=float)
        px = np.array([1.0, 5.0, 5.0, 9.5, 11.0, -1.0])
        py = np.array([1.0, 8.0, 2.0, 9.0, 5.0, 5.0])
        assert k.points_in_ring(px, py, ring).tolist() == [True, False, True, True, False, False]

    def test_best_split_single_feature(self, k):
        X = np.array([[1.0], [2.0], [3.0], [4.0]])
        y = np.array([0, 0, 1, 1])
        f, t, s = k.best_split(X, y, np.array([0]), 1)
        assert (f, t, s) == (0, 2.5, 0.0)
        assert k.best_split(X, y, np.array([0]), 3)[0] == -1


@pytest.mark.skipif(core is None, reason="compiled core not built")
def test_backends_grow_identical_trees(rng):
    for trial in range(5):
        X = rng.normal(size=(150, 6))
        X[:, 2] = np.round(X[:, 2])
        y = (X[:, 0] + X[:, 2] + rng.normal(size=150) > 0).astype(np.int64)
        keys = rng.random((300, 6))
        a = core.build_tree(X, y, keys, 3, 8, 2)
        b = fallback.build_tree(X, y, keys, 3, 8, 2)
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)
        leaf = (a[5] >= a[4]).astype(np.int64)
        np.testing.assert_array_equal(
            core.forest_votes(*a[:4], leaf, np.array([0]), X),
            fallback.forest_votes(*a[:4], leaf, np.array([0]), X),
        )


@pytest.mark.skipif(core is None, reason="compiled core not built")
def test_backends_agree_on_idw(rng):
    cx, cy = rng.uniform(0, 1000, 500), rng.uniform(0, 1000, 500)
    sx, sy = rng.uniform(0, 1000, 9), rng.uniform(0, 1000, 9)
    vals = rng.uniform(0, 3000, (9, 2))
    np.testing.assert_allclose(core.idw(cx, cy, sx, sy, vals, 2.0), fallback.idw(cx, cy, sx, sy, vals, 2.0), rtol=1e-12)
