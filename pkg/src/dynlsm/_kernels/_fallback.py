"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_core.pyx``. The
tree builder and tree traversal are bit-identical between the two; the
distance-weighted reductions agree to rounding.
"""

import numpy as np


def _gini_scores(nl, cl1, n, tot1):
    nr = n - nl
    cl0 = nl - cl1
    cr1 = tot1 - cl1
    cr0 = nr - cr1
    return (nl - (cl0 * cl0 + cl1 * cl1) / nl + nr - (cr0 * cr0 + cr1 * cr1) / nr) / n


def best_split(X, y, features, min_leaf):
    """Lowest weighted-Gini split of ``X`` over the listed features.

    Returns ``(feature, threshold, score)``; feature is -1 when no split
    leaves at least ``min_leaf`` samples on both sides.
    """
    n = X.shape[0]
    best_f, best_t, best_s = -1, 0.0, np.inf
    if n < 2:
        return best_f, best_t, best_s
    tot1 = float(y.sum())
    nl = np.arange(1, n, dtype=np.float64)
    size_ok = (nl >= min_leaf) & (n - nl >= min_leaf)
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        cl1 = np.cumsum(y[order], dtype=np.float64)[:-1]
        valid = size_ok & (xs[:-1] < xs[1:])
        if not valid.any():
            continue
        scores = _gini_scores(nl, cl1, float(n), tot1)
        scores[~valid] = np.inf
        i = int(np.argmin(scores))
        if scores[i] < best_s:
            thr = (xs[i] + xs[i + 1]) / 2.0
            if not thr < xs[i + 1]:
                thr = xs[i]
            best_f, best_t, best_s = int(f), float(thr), float(scores[i])
    return best_f, best_t, best_s


def build_tree(X, y, keys, max_features, max_depth, min_leaf):
    """Grow one CART classification tree.

    ``keys[k]`` holds the random sort keys used to pick the candidate
    features of the k-th node (preorder). Returns the flat node arrays
    ``(feature, threshold, left, right, count0, count1)``.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    feature, threshold, left, right, c0, c1 = [], [], [], [], [], []

    def grow(idx, depth):
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        n1 = int(y[idx].sum())
        c0.append(len(idx) - n1)
        c1.append(n1)
        if depth >= max_depth or len(idx) < 2 * min_leaf or n1 == 0 or n1 == len(idx):
            return node
        chosen = np.sort(np.argsort(keys[node], kind="stable")[:max_features])
        f, t, _ = best_split(X[idx], y[idx], chosen, min_leaf)
        if f < 0:
            return node
        go_left = X[idx, f] <= t
        feature[node] = f
        threshold[node] = t
        left[node] = grow(idx[go_left], depth + 1)
        right[node] = grow(idx[~go_left], depth + 1)
        return node

    grow(np.arange(X.shape[0]), 0)
    return (
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(c0, dtype=np.int64),
        np.array(c1, dtype=np.int64),
    )


def forest_votes(feature, threshold, left, right, leaf_value, roots, X):
    """Sum of leaf values reached by each row over all trees.

    Trees are concatenated into the node arrays; ``roots`` holds the global
    index of each tree's root and child pointers are global as well.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    n = X.shape[0]
    rows = np.arange(n)
    total = np.zeros(n, dtype=np.int64)
    for root in roots:
        node = np.full(n, root, dtype=np.int64)
        active = feature[node] >= 0
        while active.any():
            a = node[active]
            f = feature[a]
            go_left = X[rows[active], f] <= threshold[a]
            node[active] = np.where(go_left, left[a], right[a])
            active = feature[node] >= 0
        total += leaf_value[node]
    return total


def nearest_point(cx, cy, px, py, chunk=4096):
    """Index of and squared distance to the nearest point for each cell.

    Ties go to the lowest point index.
    """
    cx = np.asarray(cx, dtype=np.float64)
    cy = np.asarray(cy, dtype=np.float64)
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    idx = np.empty(cx.size, dtype=np.int64)
    dist2 = np.empty(cx.size, dtype=np.float64)
    for s in range(0, cx.size, chunk):
        dx = cx[s : s + chunk, None] - px[None, :]
        dy = cy[s : s + chunk, None] - py[None, :]
        d2 = dx * dx + dy * dy
        k = np.argmin(d2, axis=1)
        idx[s : s + chunk] = k
        dist2[s : s + chunk] = d2[np.arange(k.size), k]
    return idx, dist2


def idw(cx, cy, sx, sy, values, power, chunk=4096):
    """Inverse-distance weighted interpolation of ``values`` (k, m) to cells.

    A cell coinciding with a station takes that station's value (the first
    such station in input order).
    """
    cx = np.asarray(cx, dtype=np.float64)
    cy = np.asarray(cy, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    out = np.empty((cx.size, values.shape[1]), dtype=np.float64)
    half = power / 2.0
    for s in range(0, cx.size, chunk):
        dx = cx[s : s + chunk, None] - sx[None, :]
        dy = cy[s : s + chunk, None] - sy[None, :]
        d2 = dx * dx + dy * dy
        hit = d2 == 0.0
        with np.errstate(divide="ignore"):
            w = 1.0 / np.power(d2, half)
        w[hit] = 0.0
        res = (w @ values) / w.sum(axis=1)[:, None]
        any_hit = hit.any(axis=1)
        if any_hit.any():
            first = np.argmax(hit[any_hit], axis=1)
            res[any_hit] = values[first]
        out[s : s + chunk] = res
    return out


def segment_distance(px, py, segments, chunk=2048):
    """Minimum Euclidean distance from each point to a set of segments.

    ``segments`` is ``(m, 4)``: ``x0, y0, x1, y1`` per row.
    """
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    seg = np.asarray(segments, dtype=np.float64)
    ax, ay, bx, by = seg[:, 0], seg[:, 1], seg[:, 2], seg[:, 3]
    ex, ey = bx - ax, by - ay
    len2 = ex * ex + ey * ey
    safe = np.where(len2 > 0.0, len2, 1.0)
    out = np.empty(px.size, dtype=np.float64)
    for s in range(0, px.size, chunk):
        wx = px[s : s + chunk, None] - ax[None, :]
        wy = py[s : s + chunk, None] - ay[None, :]
        t = (wx * ex + wy * ey) / safe
        t = np.where(len2 > 0.0, np.clip(t, 0.0, 1.0), 0.0)
        dx = wx - t * ex
        dy = wy - t * ey
        out[s : s + chunk] = np.sqrt((dx * dx + dy * dy).min(axis=1))
    return out


def points_in_ring(px, py, ring):
    """Even-odd ray-casting containment test of points in a closed ring."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    ring = np.asarray(ring, dtype=np.float64)
    inside = np.zeros(px.size, dtype=bool)
    k = ring.shape[0]
    for i in range(k):
        x0, y0 = ring[i]
        x1, y1 = ring[(i + 1) % k]
        if y0 == y1:
            continue
        crosses = (y0 > py) != (y1 > py)
        xint = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < xint)
    return inside
