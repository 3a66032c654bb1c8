"""Independent reference implementations used as test oracles.

Each one is deliberately naive (loops, brute force) and shares no code with
the package under test.
"""

import numpy as np


def winding_number(vertices, faces, x):
    """Generalized winding number of a closed triangle mesh at points ``x``.

    Sum of signed solid angles (Van Oosterom and Strackee) over 4*pi; close to
    1 inside an outward-oriented surface and 0 outside.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    tri = vertices[faces]
    total = np.zeros(len(x))
    for start in range(0, len(tri), 512):
        t = tri[start : start + 512]
        a = t[None, :, 0, :] - x[:, None, :]
        b = t[None, :, 1, :] - x[:, None, :]
        c = t[None, :, 2, :] - x[:, None, :]
        la, lb, lc = (np.linalg.norm(v, axis=-1) for v in (a, b, c))
        num = np.einsum("qfi,qfi->qf", a, np.cross(b, c))
        den = (la * lb * lc + np.einsum("qfi,qfi->qf", a, b) * lc
               + np.einsum("qfi,qfi->qf", b, c) * la + np.einsum("qfi,qfi->qf", c, a) * lb)
        total += 2.0 * np.arctan2(num, den).sum(axis=1)
    return total / (4.0 * np.pi)


def brute_knn(points, queries, k):
    """Indices sorted by (squared distance, index) via a full sort per query."""
    out_i, out_d = [], []
    for q in np.asarray(queries, dtype=np.float64).reshape(-1, 3):
        d2 = ((points - q) ** 2).sum(axis=1)
        order = np.lexsort((np.arange(len(points)), d2))[:k]
        out_i.append(order)
        out_d.append(d2[order])
    return np.array(out_i), np.array(out_d)


def naive_matmul(a, b):
    n, m = a.shape
    m2, p = b.shape
    assert m == m2
    out = np.zeros((n, p))
    for i in range(n):
        for j in range(p):
            s = 0.0
            for t in range(m):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def chamfer_loops(a, b):
    """Double-loop Chamfer distance (unscaled)."""
    def one_way(src, dst):
        acc = 0.0
        for p in src:
            best = np.inf
            for q in dst:
                d = float(((p - q) ** 2).sum())
                best = min(best, d)
            acc += best
        return acc / len(src)

    return one_way(a, b) + one_way(b, a)


def nearest_pairs_loops(src, dst):
    """Index into ``dst`` of the nearest point for each ``src`` point (lowest index on ties)."""
    out = np.empty(len(src), dtype=np.int64)
    for i, p in enumerate(src):
        d = ((dst - p) ** 2).sum(axis=1)
        out[i] = int(np.argmin(d))
    return out


def central_difference(f, x, h=1e-3):
    """Gradient of scalar ``f`` at ``x`` by central differences, in float64."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def adamw_scalar(p, g, m, v, t, lr, b1, b2, eps, wd):
    """One AdamW step on a scalar, written from the textbook recurrence."""
    p = p - lr * wd * p
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p, m, v


def ks_uniform_statistic(u):
    """Kolmogorov-Smirnov distance between a sample and U(0, 1)."""
    u = np.sort(np.asarray(u, dtype=np.float64))
    n = len(u)
    i = np.arange(1, n + 1)
    return float(max((i / n - u).max(), (u - (i - 1) / n).max()))


# asymptotic KS critical value for alpha = 0.01
KS_C_001 = 1.628
