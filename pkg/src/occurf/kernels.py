"""Hot inner loops: exact kNN over a kd-tree, ray-parity crossing counts and
row scatter-add.

Every kernel has a numba implementation (``*_nb``) and a numpy implementation
(``*_np``). Both produce bit-identical output; the dispatchers at the bottom
pick one according to :mod:`occurf._accel`.
"""

import numpy as np

from . import _accel
from ._accel import njit

LEAF_SIZE = 16


# ---------------------------------------------------------------------------
# kd-tree
# ---------------------------------------------------------------------------


def build_kdtree(points, leaf_size=LEAF_SIZE):
    """Median-split kd-tree stored as flat arrays.

    Returns ``(perm, lo, hi, dim, split, left, right)``; node 0 is the root and
    leaves have ``left == -1``. Points of node ``t`` are ``perm[lo[t]:hi[t]]``.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = len(points)
    perm = np.arange(n, dtype=np.int64)
    lo, hi, dim, split, left, right = [], [], [], [], [], []

    def new_node(a, b):
        lo.append(a)
        hi.append(b)
        dim.append(0)
        split.append(0.0)
        left.append(-1)
        right.append(-1)
        return len(lo) - 1

    stack = [new_node(0, n)]
    while stack:
        t = stack.pop()
        a, b = lo[t], hi[t]
        if b - a <= leaf_size:
            continue
        seg = perm[a:b]
        pts = points[seg]
        d = int(np.argmax(pts.max(axis=0) - pts.min(axis=0)))
        mid = (b - a) // 2
        order = np.argpartition(pts[:, d], mid, kind="introselect")
        perm[a:b] = seg[order]
        dim[t] = d
        split[t] = float(points[perm[a + mid], d])
        left[t] = new_node(a, a + mid)
        right[t] = new_node(a + mid, b)
        stack.append(right[t])
        stack.append(left[t])

    return (
        perm,
        np.asarray(lo, dtype=np.int64),
        np.asarray(hi, dtype=np.int64),
        np.asarray(dim, dtype=np.int64),
        np.asarray(split, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
    )


@njit(cache=True)
def _knn_nb(points, queries, k, perm, lo, hi, dim, split, left, right):
    m = queries.shape[0]
    out_i = np.full((m, k), -1, dtype=np.int64)
    out_d = np.full((m, k), np.inf, dtype=np.float64)
    stack_node = np.empty(128, dtype=np.int64)
    stack_bound = np.empty(128, dtype=np.float64)
    for q in range(m):
        qx = queries[q, 0]
        qy = queries[q, 1]
        qz = queries[q, 2]
        bd = out_d[q]
        bi = out_i[q]
        count = 0
        top = 0
        stack_node[0] = 0
        stack_bound[0] = 0.0
        top = 1
        while top > 0:
            top -= 1
            t = stack_node[top]
            bound = stack_bound[top]
            if count == k and bound > bd[k - 1]:
                continue
            if left[t] == -1:
                for s in range(lo[t], hi[t]):
                    i = perm[s]
                    dx = qx - points[i, 0]
                    dy = qy - points[i, 1]
                    dz = qz - points[i, 2]
                    d = dx * dx + dy * dy + dz * dz
                    if count < k:
                        pos = count
                        count += 1
                    elif d < bd[k - 1] or (d == bd[k - 1] and i < bi[k - 1]):
                        pos = k - 1
                    else:
                        continue
                    while pos > 0 and (d < bd[pos - 1] or (d == bd[pos - 1] and i < bi[pos - 1])):
                        bd[pos] = bd[pos - 1]
                        bi[pos] = bi[pos - 1]
                        pos -= 1
                    bd[pos] = d
                    bi[pos] = i
            else:
                diff = queries[q, dim[t]] - split[t]
                if diff < 0.0:
                    near = left[t]
                    far = right[t]
                else:
                    near = right[t]
                    far = left[t]
                fb = diff * diff
                if fb < bound:
                    fb = bound
                if top + 2 > stack_node.shape[0]:
                    stack_node = np.concatenate((stack_node, np.empty_like(stack_node)))
                    stack_bound = np.concatenate((stack_bound, np.empty_like(stack_bound)))
                stack_node[top] = far
                stack_bound[top] = fb
                top += 1
                stack_node[top] = near
                stack_bound[top] = bound
                top += 1
    return out_i, out_d


def _knn_np(points, queries, k):
    n = len(points)
    m = len(queries)
    out_i = np.empty((m, k), dtype=np.int64)
    out_d = np.empty((m, k), dtype=np.float64)
    chunk = max(1, 4_000_000 // max(n, 1))
    for a in range(0, m, chunk):
        q = queries[a : a + chunk]
        dx = q[:, 0, None] - points[None, :, 0]
        dy = q[:, 1, None] - points[None, :, 1]
        dz = q[:, 2, None] - points[None, :, 2]
        d = dx * dx + dy * dy + dz * dz
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        out_i[a : a + chunk] = order
        out_d[a : a + chunk] = np.take_along_axis(d, order, axis=1)
    return out_i, out_d


def knn_nb(points, tree, queries, k):
    return _knn_nb(points, queries, k, *tree)


def knn_np(points, tree, queries, k):
    return _knn_np(points, queries, k)


def knn(points, tree, queries, k):
    """Exact k nearest neighbours sorted by (squared distance, index)."""
    queries = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
    k = min(int(k), len(points))
    if _accel.use_numba():
        return knn_nb(points, tree, queries, k)
    return knn_np(points, tree, queries, k)


# ---------------------------------------------------------------------------
# ray parity
# ---------------------------------------------------------------------------


def ray_frame(direction):
    """Orthonormal frame ``(d, u, v)`` with ``d`` the normalised direction."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    helper = np.zeros(3)
    helper[int(np.argmin(np.abs(d)))] = 1.0
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    v = np.cross(d, u)
    return np.stack([d, u, v])


def project(frame, queries, vertices, faces):
    """Coordinates of queries and triangle corners in the ray frame."""
    qp = np.ascontiguousarray(queries @ frame.T)
    vp = vertices @ frame.T
    tp = np.ascontiguousarray(vp[faces])  # (F, 3 corners, 3 coords)
    return qp, tp


@njit(cache=True)
def _tri_test(qb, qc, qa, t, f, eps):
    """0: miss, 1: crossing beyond the query, 2: ray grazes an edge/vertex."""
    a0 = t[f, 0, 0]
    b0 = t[f, 0, 1]
    c0 = t[f, 0, 2]
    a1 = t[f, 1, 0]
    b1 = t[f, 1, 1]
    c1 = t[f, 1, 2]
    a2 = t[f, 2, 0]
    b2 = t[f, 2, 1]
    c2 = t[f, 2, 2]
    w0 = (b2 - b1) * (qc - c1) - (c2 - c1) * (qb - b1)
    w1 = (b0 - b2) * (qc - c2) - (c0 - c2) * (qb - b2)
    w2 = (b1 - b0) * (qc - c0) - (c1 - c0) * (qb - b0)
    area = w0 + w1 + w2
    if area == 0.0:
        return 0
    s = 1.0 if area > 0.0 else -1.0
    l0 = np.sqrt((b2 - b1) * (b2 - b1) + (c2 - c1) * (c2 - c1))
    l1 = np.sqrt((b0 - b2) * (b0 - b2) + (c0 - c2) * (c0 - c2))
    l2 = np.sqrt((b1 - b0) * (b1 - b0) + (c1 - c0) * (c1 - c0))
    s0 = s * w0
    s1 = s * w1
    s2 = s * w2
    if s0 < -eps * l0 or s1 < -eps * l1 or s2 < -eps * l2:
        return 0
    if s0 <= eps * l0 or s1 <= eps * l1 or s2 <= eps * l2:
        return 2
    depth = (w0 * a0 + w1 * a1 + w2 * a2) / area
    if depth > qa:
        return 1
    return 0


@njit(cache=True)
def _parity_nb(qp, tp, eps):
    m = qp.shape[0]
    nf = tp.shape[0]
    cross = np.zeros(m, dtype=np.int64)
    flag = np.zeros(m, dtype=np.bool_)
    if nf == 0:
        return cross, flag
    bmin = np.inf
    bmax = -np.inf
    cmin = np.inf
    cmax = -np.inf
    for f in range(nf):
        for j in range(3):
            b = tp[f, j, 1]
            c = tp[f, j, 2]
            bmin = min(bmin, b)
            bmax = max(bmax, b)
            cmin = min(cmin, c)
            cmax = max(cmax, c)
    g = int(np.sqrt(nf))
    g = max(1, min(g, 512))
    wb = (bmax - bmin) / g + 1e-300
    wc = (cmax - cmin) / g + 1e-300
    lo_b = np.empty(nf, dtype=np.int64)
    hi_b = np.empty(nf, dtype=np.int64)
    lo_c = np.empty(nf, dtype=np.int64)
    hi_c = np.empty(nf, dtype=np.int64)
    counts = np.zeros(g * g + 1, dtype=np.int64)
    for f in range(nf):
        tb0 = min(tp[f, 0, 1], min(tp[f, 1, 1], tp[f, 2, 1]))
        tb1 = max(tp[f, 0, 1], max(tp[f, 1, 1], tp[f, 2, 1]))
        tc0 = min(tp[f, 0, 2], min(tp[f, 1, 2], tp[f, 2, 2]))
        tc1 = max(tp[f, 0, 2], max(tp[f, 1, 2], tp[f, 2, 2]))
        # widen by eps so grazing queries see the triangle
        lo_b[f] = max(0, min(g - 1, int((tb0 - eps - bmin) / wb)))
        hi_b[f] = max(0, min(g - 1, int((tb1 + eps - bmin) / wb)))
        lo_c[f] = max(0, min(g - 1, int((tc0 - eps - cmin) / wc)))
        hi_c[f] = max(0, min(g - 1, int((tc1 + eps - cmin) / wc)))
        for i in range(lo_b[f], hi_b[f] + 1):
            for j in range(lo_c[f], hi_c[f] + 1):
                counts[i * g + j + 1] += 1
    for i in range(g * g):
        counts[i + 1] += counts[i]
    fill = counts[:-1].copy()
    items = np.empty(counts[-1], dtype=np.int64)
    for f in range(nf):
        for i in range(lo_b[f], hi_b[f] + 1):
            for j in range(lo_c[f], hi_c[f] + 1):
                items[fill[i * g + j]] = f
                fill[i * g + j] += 1
    for q in range(m):
        qa = qp[q, 0]
        qb = qp[q, 1]
        qc = qp[q, 2]
        if qb < bmin - eps or qb > bmax + eps or qc < cmin - eps or qc > cmax + eps:
            continue
        i = max(0, min(g - 1, int((qb - bmin) / wb)))
        j = max(0, min(g - 1, int((qc - cmin) / wc)))
        cell = i * g + j
        n_hit = 0
        for s in range(counts[cell], counts[cell + 1]):
            r = _tri_test(qb, qc, qa, tp, items[s], eps)
            if r == 2:
                flag[q] = True
                break
            n_hit += r
        if not flag[q]:
            cross[q] = n_hit
    return cross, flag


def _parity_np(qp, tp, eps):
    m = len(qp)
    nf = len(tp)
    cross = np.zeros(m, dtype=np.int64)
    flag = np.zeros(m, dtype=bool)
    if nf == 0:
        return cross, flag
    a0, b0, c0 = tp[:, 0, 0], tp[:, 0, 1], tp[:, 0, 2]
    a1, b1, c1 = tp[:, 1, 0], tp[:, 1, 1], tp[:, 1, 2]
    a2, b2, c2 = tp[:, 2, 0], tp[:, 2, 1], tp[:, 2, 2]
    l0 = np.sqrt((b2 - b1) * (b2 - b1) + (c2 - c1) * (c2 - c1))
    l1 = np.sqrt((b0 - b2) * (b0 - b2) + (c0 - c2) * (c0 - c2))
    l2 = np.sqrt((b1 - b0) * (b1 - b0) + (c1 - c0) * (c1 - c0))
    chunk = max(1, 2_000_000 // nf)
    for s in range(0, m, chunk):
        qa = qp[s : s + chunk, 0, None]
        qb = qp[s : s + chunk, 1, None]
        qc = qp[s : s + chunk, 2, None]
        w0 = (b2 - b1) * (qc - c1) - (c2 - c1) * (qb - b1)
        w1 = (b0 - b2) * (qc - c2) - (c0 - c2) * (qb - b2)
        w2 = (b1 - b0) * (qc - c0) - (c1 - c0) * (qb - b0)
        area = w0 + w1 + w2
        sg = np.where(area > 0.0, 1.0, -1.0)
        s0, s1, s2 = sg * w0, sg * w1, sg * w2
        valid = area != 0.0
        closed = valid & (s0 >= -eps * l0) & (s1 >= -eps * l1) & (s2 >= -eps * l2)
        graze = closed & ((s0 <= eps * l0) | (s1 <= eps * l1) | (s2 <= eps * l2))
        strict = closed & ~graze
        with np.errstate(divide="ignore", invalid="ignore"):
            depth = (w0 * a0 + w1 * a1 + w2 * a2) / area
        hit = strict & (depth > qa)
        cross[s : s + chunk] = hit.sum(axis=1)
        flag[s : s + chunk] = graze.any(axis=1)
    cross[flag] = 0
    return cross, flag


def parity_nb(qp, tp, eps):
    return _parity_nb(qp, tp, eps)


def parity_np(qp, tp, eps):
    return _parity_np(qp, tp, eps)


def ray_crossings(queries, vertices, faces, direction, eps=1e-9):
    """Count triangle crossings of the ray ``q + s*direction, s > 0``.

    Returns ``(crossings, grazed)``; ``grazed`` marks queries whose ray passed
    within ``eps`` of an edge or vertex, for which the count is unusable.
    """
    frame = ray_frame(direction)
    qp, tp = project(frame, np.asarray(queries, dtype=np.float64).reshape(-1, 3), vertices, faces)
    if _accel.use_numba():
        return parity_nb(qp, tp, eps)
    return parity_np(qp, tp, eps)


# ---------------------------------------------------------------------------
# scatter-add
# ---------------------------------------------------------------------------


@njit(cache=True)
def _scatter_rows_nb(index, values, out):
    for r in range(index.shape[0]):
        row = index[r]
        for c in range(values.shape[1]):
            out[row, c] += values[r, c]
    return out


def scatter_rows_nb(index, values, n_rows):
    out = np.zeros((n_rows, values.shape[1]), dtype=values.dtype)
    return _scatter_rows_nb(index, values, out)


def scatter_rows_np(index, values, n_rows):
    out = np.zeros((n_rows, values.shape[1]), dtype=values.dtype)
    np.add.at(out, index, values)
    return out


def scatter_rows(index, values, n_rows):
    """``out[index[r]] += values[r]`` in row order; ``values`` is ``(len(index), C)``."""
    index = np.ascontiguousarray(index, dtype=np.int64)
    values = np.ascontiguousarray(values)
    if _accel.use_numba():
        return scatter_rows_nb(index, values, n_rows)
    return scatter_rows_np(index, values, n_rows)
