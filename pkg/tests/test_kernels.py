"""The numba and numpy kernel paths must agree bit for bit."""

import numpy as np
import pytest

from occurf import _accel, kernels
from occurf.geom import make_primitive


pytestmark = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")


def test_knn_paths_identical():
    rng = np.random.default_rng(0)
    pts = rng.random((3000, 3))
    # duplicated points force distance ties
    pts[100:200] = pts[:100]
    q = np.vstack([rng.random((400, 3)), pts[:50]])
    tree = kernels.build_kdtree(pts)
    a = kernels.knn_nb(pts, tree, q, 9)
    b = kernels.knn_np(pts, tree, q, 9)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_parity_paths_identical():
    m = make_primitive("union")
    q = np.random.default_rng(1).random((3000, 3))
    frame = kernels.ray_frame(np.array([0.3, 0.5, 0.81]))
    qp, tp = kernels.project(frame, q, m.vertices, m.faces)
    a = kernels.parity_nb(qp, tp, 1e-9)
    b = kernels.parity_np(qp, tp, 1e-9)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_parity_graze_flag_identical():
    m = make_primitive("box")
    q = np.array([[0.5, 0.5, 0.5], [0.5, 0.3, 0.3], [0.4, 0.45, 0.5]])
    frame = kernels.ray_frame(np.array([1.0, 0.0, 0.0]))
    qp, tp = kernels.project(frame, q, m.vertices, m.faces)
    a = kernels.parity_nb(qp, tp, 1e-9)
    b = kernels.parity_np(qp, tp, 1e-9)
    assert a[1].tolist() == [True, True, False]
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_scatter_paths_identical():
    rng = np.random.default_rng(2)
    idx = rng.integers(0, 50, size=5000)
    vals = rng.normal(size=(5000, 7)).astype(np.float32)
    a = kernels.scatter_rows_nb(idx, vals, 50)
    b = kernels.scatter_rows_np(idx, vals, 50)
    assert np.array_equal(a, b)


def test_dispatch_switch():
    pts = np.random.default_rng(3).random((200, 3))
    tree = kernels.build_kdtree(pts)
    before = _accel.use_numba()
    try:
        _accel.set_use_numba(False)
        assert not _accel.use_numba()
        a = kernels.knn(pts, tree, pts[:10], 4)
        _accel.set_use_numba(True)
        b = kernels.knn(pts, tree, pts[:10], 4)
    finally:
        _accel.set_use_numba(before)
    assert np.array_equal(a[0], b[0])
