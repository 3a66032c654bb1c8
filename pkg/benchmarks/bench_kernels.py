"""Compare the numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 3]

Each kernel is run once untimed so JIT compilation is excluded, then timed
``--repeat`` times; the best time is reported along with a check that both
paths return identical arrays.
"""

import argparse
import time

import numpy as np

from occurf import kernels
from occurf.geom import make_primitive


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    pts = rng.random((20000, 3))
    queries = rng.random((5000, 3))
    tree = kernels.build_kdtree(pts)
    yield ("knn 20k pts, 5k queries, k=16",
           lambda: kernels.knn_nb(pts, tree, queries, 16),
           lambda: kernels.knn_np(pts, tree, queries, 16))

    mesh = make_primitive("torus", 48)
    frame = kernels.ray_frame(np.array([0.31, 0.57, 0.76]))
    qp, tp = kernels.project(frame, rng.random((4000, 3)), mesh.vertices, mesh.faces)
    yield (f"ray parity 4k queries, {len(mesh.faces)} triangles",
           lambda: kernels.parity_nb(qp, tp, 1e-9),
           lambda: kernels.parity_np(qp, tp, 1e-9))

    index = rng.integers(0, 1000, size=200000)
    values = rng.random((200000, 64)).astype(np.float32)
    yield ("scatter-add 200k rows x 64 into 1k",
           lambda: kernels.scatter_rows_nb(index, values, 1000),
           lambda: kernels.scatter_rows_np(index, values, 1000))


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print(f"{'kernel':<44} {'numba s':>9} {'numpy s':>9} {'speedup':>8}  identical")
    for name, fast, slow in cases(np.random.default_rng(args.seed)):
        t_nb, t_np = best_of(fast, args.repeat), best_of(slow, args.repeat)
        print(f"{name:<44} {t_nb:9.4f} {t_np:9.4f} {t_np / t_nb:7.1f}x  {same(fast(), slow())}")


if __name__ == "__main__":
    main()
