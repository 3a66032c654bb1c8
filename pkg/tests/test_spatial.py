import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from occurf import spatial
from occurf.errors import BadArgument, EmptyInput
from occurf.spatial import KnnIndex, coverage, covering_subsets, extract_patches, random_subset
from oracles import brute_knn


def test_knn_exact_against_brute_force():
    rng = np.random.default_rng(0)
    pts = rng.random((5000, 3))
    q = rng.random((1000, 3))
    idx, d2 = KnnIndex(pts).query(q, 16)
    bi, bd = brute_knn(pts, q, 16)
    assert np.array_equal(idx, bi)
    assert np.array_equal(d2, bd)


def test_knn_ties_break_by_index():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, 0, 5.0]])
    idx, d2 = KnnIndex(pts).query(np.zeros((1, 3)), 3)
    assert idx[0].tolist() == [0, 1, 2]
    assert d2[0].tolist() == [1.0, 1.0, 1.0]


def test_knn_k_larger_than_n():
    pts = np.random.default_rng(1).random((5, 3))
    idx, _ = KnnIndex(pts).query(pts[:2], 10)
    assert idx.shape == (2, 5)


def test_single_point_knn_helper():
    index = spatial.build_index(np.array([[0.0, 0, 0], [2.0, 0, 0]]))
    assert spatial.knn(index, [0.5, 0, 0], 1) == [(0, 0.25)]


def test_index_does_not_freeze_caller_array():
    pts = np.random.default_rng(2).random((50, 3))
    KnnIndex(pts)
    pts[0, 0] = 3.0  # still writable


def test_empty_index_rejected():
    with pytest.raises(EmptyInput):
        KnnIndex(np.zeros((0, 3)))
    with pytest.raises(BadArgument):
        KnnIndex(np.zeros((3, 3))).query(np.zeros((1, 3)), 0)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 60), st.just(3)),
                  elements=st.floats(-1, 1, allow_nan=False)),
       st.integers(1, 12))
def test_knn_property_matches_brute(pts, k):
    q = np.vstack([pts[:3], np.zeros((1, 3))])
    idx, d2 = KnnIndex(pts).query(q, k)
    bi, bd = brute_knn(pts, q, min(k, len(pts)))
    assert np.array_equal(idx, bi)
    assert np.array_equal(d2, bd)


def test_patch_normalized_into_unit_ball():
    rng = np.random.default_rng(3)
    pts = rng.random((500, 3))
    index = KnnIndex(pts)
    x = rng.random((20, 3))
    for center in ("query", "centroid"):
        pb = extract_patches(index, x, 50, center)
        r = np.linalg.norm(pb.normalized_points, axis=2)
        assert r.max() <= 1 + 1e-12
        np.testing.assert_allclose(r.max(axis=1), 1.0)
        np.testing.assert_allclose(pb.normalized_points * pb.scale[:, None, None] + pb.center[:, None, :],
                                   pb.raw_points, atol=1e-12)
    pb = extract_patches(index, x, 50, "centroid")
    np.testing.assert_allclose(pb.normalized_points.mean(axis=1), 0.0, atol=1e-12)


def test_patch_short_and_degenerate():
    index = KnnIndex(np.array([[0.2, 0.2, 0.2]]))
    p = spatial.extract_patch(index, index.points, [0.2, 0.2, 0.2], 50)
    assert p.short and len(p) == 1
    assert p.scale == 1.0
    assert np.array_equal(p.normalized_points, np.zeros((1, 3)))


def test_random_subset_sorted_unique():
    s = random_subset(1000, 100, seed=4)
    assert s.size == 100
    assert np.array_equal(s.indices, np.unique(s.indices))
    assert random_subset(10, 50).size == 10
    assert np.array_equal(random_subset(1000, 100, seed=4).indices, s.indices)


@pytest.mark.parametrize("n,m,cover", [(400, 100, 10), (1000, 250, 10), (50, 50, 3), (10, 1, 2)])
def test_covering_subsets_reach_min_cover(n, m, cover):
    subs = covering_subsets(n, m, cover, seed=5)
    assert coverage(subs, n).min() >= cover
    if m >= n:
        assert len(subs) == cover


def test_covering_subsets_deterministic():
    a = covering_subsets(300, 50, 4, seed=9)
    b = covering_subsets(300, 50, 4, seed=9)
    assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))
