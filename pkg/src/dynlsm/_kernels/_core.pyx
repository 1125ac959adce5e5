# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_fallback.py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, pow, INFINITY
from libc.stdlib cimport malloc, free, qsort

cnp.import_array()


cdef struct Pair:
    double x
    long y


cdef int _cmp_pair(const void* a, const void* b) noexcept nogil:
    cdef double xa = (<Pair*>a).x
    cdef double xb = (<Pair*>b).x
    if xa < xb:
        return -1
    if xa > xb:
        return 1
    return 0


cdef void _split_range(const double[:, ::1] X, const long[::1] y, const long[::1] members,
                       Py_ssize_t start, Py_ssize_t end, const long* feats, Py_ssize_t nfeat,
                       long min_leaf, Pair* buf,
                       long* out_f, double* out_t, double* out_s) noexcept nogil:
    cdef Py_ssize_t n = end - start
    cdef Py_ssize_t i, k
    cdef long f
    cdef double tot1 = 0.0, cl1, nl, nr, cl0, cr1, cr0, score, thr
    cdef double dn = <double>n
    out_f[0] = -1
    out_t[0] = 0.0
    out_s[0] = INFINITY
    if n < 2:
        return
    for i in range(start, end):
        tot1 += y[members[i]]
    for k in range(nfeat):
        f = feats[k]
        for i in range(n):
            buf[i].x = X[members[start + i], f]
            buf[i].y = y[members[start + i]]
        qsort(buf, n, sizeof(Pair), _cmp_pair)
        cl1 = 0.0
        for i in range(n - 1):
            cl1 += buf[i].y
            nl = <double>(i + 1)
            if nl < min_leaf or dn - nl < min_leaf:
                continue
            if not buf[i].x < buf[i + 1].x:
                continue
            nr = dn - nl
            cl0 = nl - cl1
            cr1 = tot1 - cl1
            cr0 = nr - cr1
            score = (nl - (cl0 * cl0 + cl1 * cl1) / nl + nr - (cr0 * cr0 + cr1 * cr1) / nr) / dn
            if score < out_s[0]:
                thr = (buf[i].x + buf[i + 1].x) / 2.0
                if not thr < buf[i + 1].x:
                    thr = buf[i].x
                out_f[0] = f
                out_t[0] = thr
                out_s[0] = score


def best_split(X, y, features, long min_leaf):
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const long[::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    cdef long[::1] feats = np.ascontiguousarray(features, dtype=np.int64)
    cdef long[::1] members = np.arange(Xv.shape[0], dtype=np.int64)
    cdef Py_ssize_t n = Xv.shape[0]
    cdef long bf
    cdef double bt, bs
    cdef Pair* buf = <Pair*>malloc((n + 1) * sizeof(Pair))
    if buf == NULL:
        raise MemoryError()
    try:
        _split_range(Xv, yv, members, 0, n, &feats[0] if feats.shape[0] else NULL,
                     feats.shape[0], min_leaf, buf, &bf, &bt, &bs)
    finally:
        free(buf)
    return int(bf), float(bt), float(bs)


cdef struct Frame:
    Py_ssize_t start
    Py_ssize_t end
    long depth
    long parent
    int is_left


def build_tree(X, y, keys, long max_features, long max_depth, long min_leaf):
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const long[::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    cdef const double[:, ::1] kv = np.ascontiguousarray(keys, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0]
    cdef Py_ssize_t d = Xv.shape[1]
    cdef Py_ssize_t cap = 2 * n + 1
    if kv.shape[0] < cap - 1 or kv.shape[1] != d:
        raise ValueError("keys must have at least 2n rows and one column per feature")
    if max_features > d:
        max_features = d

    feature_a = np.full(cap, -1, dtype=np.int64)
    threshold_a = np.zeros(cap, dtype=np.float64)
    left_a = np.full(cap, -1, dtype=np.int64)
    right_a = np.full(cap, -1, dtype=np.int64)
    c0_a = np.zeros(cap, dtype=np.int64)
    c1_a = np.zeros(cap, dtype=np.int64)
    cdef long[::1] feature = feature_a
    cdef double[::1] threshold = threshold_a
    cdef long[::1] left = left_a
    cdef long[::1] right = right_a
    cdef long[::1] c0 = c0_a
    cdef long[::1] c1 = c1_a
    cdef long[::1] members = np.arange(n, dtype=np.int64)

    cdef Pair* buf = <Pair*>malloc((n + 1) * sizeof(Pair))
    cdef Frame* stack = <Frame*>malloc((cap + 1) * sizeof(Frame))
    cdef long* order = <long*>malloc((d + 1) * sizeof(long))
    cdef long* chosen = <long*>malloc((d + 1) * sizeof(long))
    if buf == NULL or stack == NULL or order == NULL or chosen == NULL:
        free(buf); free(stack); free(order); free(chosen)
        raise MemoryError()

    cdef Py_ssize_t top = 0, i, j, lo, hi
    cdef long node, counter = 0, n1, tmp, bf
    cdef double bt, bs
    cdef Frame fr
    try:
        with nogil:
            stack[0].start = 0
            stack[0].end = n
            stack[0].depth = 0
            stack[0].parent = -1
            stack[0].is_left = 0
            top = 1
            while top > 0:
                top -= 1
                fr = stack[top]
                node = counter
                counter += 1
                if fr.parent >= 0:
                    if fr.is_left:
                        left[fr.parent] = node
                    else:
                        right[fr.parent] = node
                n1 = 0
                for i in range(fr.start, fr.end):
                    n1 += yv[members[i]]
                c1[node] = n1
                c0[node] = (fr.end - fr.start) - n1
                if (fr.depth >= max_depth or fr.end - fr.start < 2 * min_leaf
                        or n1 == 0 or n1 == fr.end - fr.start):
                    continue
                # candidate features: the max_features smallest keys, ties by index
                for i in range(d):
                    order[i] = i
                for i in range(1, d):
                    tmp = order[i]
                    j = i - 1
                    while j >= 0 and kv[node, order[j]] > kv[node, tmp]:
                        order[j + 1] = order[j]
                        j -= 1
                    order[j + 1] = tmp
                for i in range(max_features):
                    chosen[i] = order[i]
                for i in range(1, max_features):
                    tmp = chosen[i]
                    j = i - 1
                    while j >= 0 and chosen[j] > tmp:
                        chosen[j + 1] = chosen[j]
                        j -= 1
                    chosen[j + 1] = tmp
                _split_range(Xv, yv, members, fr.start, fr.end, chosen, max_features,
                             min_leaf, buf, &bf, &bt, &bs)
                if bf < 0:
                    continue
                feature[node] = bf
                threshold[node] = bt
                # stable partition: left-going members first
                j = 0
                for i in range(fr.start, fr.end):
                    if Xv[members[i], bf] <= bt:
                        buf[j].y = members[i]
                        j += 1
                lo = j
                for i in range(fr.start, fr.end):
                    if not Xv[members[i], bf] <= bt:
                        buf[j].y = members[i]
                        j += 1
                for i in range(fr.end - fr.start):
                    members[fr.start + i] = buf[i].y
                # right pushed first so the left subtree is numbered first (preorder)
                stack[top].start = fr.start + lo
                stack[top].end = fr.end
                stack[top].depth = fr.depth + 1
                stack[top].parent = node
                stack[top].is_left = 0
                top += 1
                stack[top].start = fr.start
                stack[top].end = fr.start + lo
                stack[top].depth = fr.depth + 1
                stack[top].parent = node
                stack[top].is_left = 1
                top += 1
    finally:
        free(buf); free(stack); free(order); free(chosen)
    m = counter
    return (feature_a[:m].copy(), threshold_a[:m].copy(), left_a[:m].copy(),
            right_a[:m].copy(), c0_a[:m].copy(), c1_a[:m].copy())


def forest_votes(feature, threshold, left, right, leaf_value, roots, X):
    cdef const long[::1] fv = np.ascontiguousarray(feature, dtype=np.int64)
    cdef const double[::1] tv = np.ascontiguousarray(threshold, dtype=np.float64)
    cdef const long[::1] lv = np.ascontiguousarray(left, dtype=np.int64)
    cdef const long[::1] rv = np.ascontiguousarray(right, dtype=np.int64)
    cdef const long[::1] vv = np.ascontiguousarray(leaf_value, dtype=np.int64)
    cdef const long[::1] rootv = np.ascontiguousarray(roots, dtype=np.int64)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    out = np.zeros(Xv.shape[0], dtype=np.int64)
    cdef long[::1] ov = out
    cdef Py_ssize_t r, t
    cdef long node
    with nogil:
        for r in range(Xv.shape[0]):
            for t in range(rootv.shape[0]):
                node = rootv[t]
                while fv[node] >= 0:
                    if Xv[r, fv[node]] <= tv[node]:
                        node = lv[node]
                    else:
                        node = rv[node]
                ov[r] += vv[node]
    return out


def nearest_point(cx, cy, px, py):
    cdef const double[::1] cxv = np.ascontiguousarray(cx, dtype=np.float64)
    cdef const double[::1] cyv = np.ascontiguousarray(cy, dtype=np.float64)
    cdef const double[::1] pxv = np.ascontiguousarray(px, dtype=np.float64)
    cdef const double[::1] pyv = np.ascontiguousarray(py, dtype=np.float64)
    idx = np.empty(cxv.shape[0], dtype=np.int64)
    dist2 = np.empty(cxv.shape[0], dtype=np.float64)
    cdef long[::1] iv = idx
    cdef double[::1] dv = dist2
    cdef Py_ssize_t c, k
    cdef double dx, dy, d2, best
    cdef long bk
    with nogil:
        for c in range(cxv.shape[0]):
            best = INFINITY
            bk = 0
            for k in range(pxv.shape[0]):
                dx = cxv[c] - pxv[k]
                dy = cyv[c] - pyv[k]
                d2 = dx * dx + dy * dy
                if d2 < best:
                    best = d2
                    bk = k
            iv[c] = bk
            dv[c] = best
    return idx, dist2


def idw(cx, cy, sx, sy, values, double power):
    cdef const double[::1] cxv = np.ascontiguousarray(cx, dtype=np.float64)
    cdef const double[::1] cyv = np.ascontiguousarray(cy, dtype=np.float64)
    cdef const double[::1] sxv = np.ascontiguousarray(sx, dtype=np.float64)
    cdef const double[::1] syv = np.ascontiguousarray(sy, dtype=np.float64)
    cdef const double[:, ::1] val = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t m = val.shape[1]
    out = np.zeros((cxv.shape[0], m), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t c, k, j
    cdef double dx, dy, d2, w, wsum
    cdef double half = power / 2.0
    cdef long hit
    with nogil:
        for c in range(cxv.shape[0]):
            hit = -1
            wsum = 0.0
            for k in range(sxv.shape[0]):
                dx = cxv[c] - sxv[k]
                dy = cyv[c] - syv[k]
                d2 = dx * dx + dy * dy
                if d2 == 0.0:
                    hit = k
                    break
                w = 1.0 / pow(d2, half)
                wsum += w
                for j in range(m):
                    ov[c, j] += w * val[k, j]
            if hit >= 0:
                for j in range(m):
                    ov[c, j] = val[hit, j]
            else:
                for j in range(m):
                    ov[c, j] /= wsum
    return out


def segment_distance(px, py, segments):
    cdef const double[::1] pxv = np.ascontiguousarray(px, dtype=np.float64)
    cdef const double[::1] pyv = np.ascontiguousarray(py, dtype=np.float64)
    cdef const double[:, ::1] sg = np.ascontiguousarray(segments, dtype=np.float64)
    out = np.empty(pxv.shape[0], dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t p, k
    cdef double ex, ey, len2, wx, wy, t, dx, dy, d2, best
    with nogil:
        for p in range(pxv.shape[0]):
            best = INFINITY
            for k in range(sg.shape[0]):
                ex = sg[k, 2] - sg[k, 0]
                ey = sg[k, 3] - sg[k, 1]
                len2 = ex * ex + ey * ey
                wx = pxv[p] - sg[k, 0]
                wy = pyv[p] - sg[k, 1]
                if len2 > 0.0:
                    t = (wx * ex + wy * ey) / len2
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
                else:
                    t = 0.0
                dx = wx - t * ex
                dy = wy - t * ey
                d2 = dx * dx + dy * dy
                if d2 < best:
                    best = d2
            ov[p] = sqrt(best)
    return out


def points_in_ring(px, py, ring):
    cdef const double[::1] pxv = np.ascontiguousarray(px, dtype=np.float64)
    cdef const double[::1] pyv = np.ascontiguousarray(py, dtype=np.float64)
    cdef const double[:, ::1] rg = np.ascontiguousarray(ring, dtype=np.float64)
    out = np.zeros(pxv.shape[0], dtype=bool)
    cdef cnp.npy_bool[::1] ov = out
    cdef Py_ssize_t p, i, k = rg.shape[0]
    cdef double x0, y0, x1, y1, xint
    cdef int inside
    with nogil:
        for p in range(pxv.shape[0]):
            inside = 0
            for i in range(k):
                x0 = rg[i, 0]
                y0 = rg[i, 1]
                x1 = rg[(i + 1) % k, 0]
                y1 = rg[(i + 1) % k, 1]
                if y0 == y1:
                    continue
                if (y0 > pyv[p]) != (y1 > pyv[p]):
                    xint = x0 + (pyv[p] - y0) * (x1 - x0) / (y1 - y0)
                    if pxv[p] < xint:
                        inside = not inside
            ov[p] = inside
    return out
