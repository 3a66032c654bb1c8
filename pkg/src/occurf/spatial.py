"""Exact nearest-neighbour index, local patches and sparse subsampling."""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import BadArgument, EmptyInput


class KnnIndex:
    """Immutable kd-tree over a fixed point set.

    Queries are exact; results are sorted by squared distance with ties broken
    by ascending point index.
    """

    def __init__(self, points):
        points = np.array(getattr(points, "points", points), dtype=np.float64, copy=True).reshape(-1, 3)
        if len(points) == 0:
            raise EmptyInput("cannot index an empty point set")
        self.points = points
        self.points.setflags(write=False)
        self.n = len(points)
        self._tree = kernels.build_kdtree(points)

    def query(self, x, k):
        """``(indices, sq_distances)`` of shape ``(m, min(k, n))`` for ``x`` of shape ``(m, 3)``."""
        if k < 1:
            raise BadArgument("k must be >= 1")
        return kernels.knn(self.points, self._tree, x, k)


def build_index(cloud):
    return KnnIndex(cloud)


def knn(index, x, k):
    """Neighbours of a single point as a list of ``(index, squared distance)``."""
    idx, d2 = index.query(np.asarray(x, dtype=np.float64).reshape(1, 3), k)
    return [(int(i), float(d)) for i, d in zip(idx[0], d2[0])]


@dataclass
class Patch:
    raw_points: np.ndarray
    normalized_points: np.ndarray
    center: np.ndarray
    scale: float
    short: bool = False

    def __len__(self):
        return len(self.raw_points)


@dataclass
class PatchBatch:
    """Patches for many queries at once; arrays carry a leading query axis."""

    raw_points: np.ndarray  # (m, k, 3)
    normalized_points: np.ndarray  # (m, k, 3)
    center: np.ndarray  # (m, 3)
    scale: np.ndarray  # (m,)
    short: bool = False

    def __len__(self):
        return len(self.center)

    def __getitem__(self, i):
        return Patch(self.raw_points[i], self.normalized_points[i], self.center[i], float(self.scale[i]), self.short)


def extract_patches(index, x, k, center="query"):
    """Normalized ``k``-NN patches around each query in ``x`` of shape ``(m, 3)``.

    ``center="query"`` translates by the query point itself, ``"centroid"`` by
    the patch mean. Points are then scaled into the unit ball; a zero radius
    falls back to scale 1.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    idx, _ = index.query(x, k)
    raw = index.points[idx]
    if center == "query":
        c = x.copy()
    elif center == "centroid":
        c = raw.mean(axis=1)
    else:
        raise BadArgument(f"unknown patch center {center!r}")
    rel = raw - c[:, None, :]
    scale = np.sqrt((rel * rel).sum(axis=2)).max(axis=1)
    scale = np.where(scale > 0.0, scale, 1.0)
    return PatchBatch(raw, rel / scale[:, None, None], c, scale, short=idx.shape[1] < k)


def extract_patch(index, cloud, x, k, center="query"):
    if len(getattr(cloud, "points", cloud)) == 0:
        raise EmptyInput("empty cloud")
    return extract_patches(index, x, k, center)[0]


@dataclass
class SparseSubset:
    indices: np.ndarray  # sorted, unique

    @property
    def size(self):
        return len(self.indices)

    def __len__(self):
        return len(self.indices)


def _count(cloud):
    if isinstance(cloud, (int, np.integer)):
        return int(cloud)
    return len(getattr(cloud, "points", cloud))


def random_subset(cloud, m, seed=0):
    """Uniform subset of ``min(m, n)`` indices drawn without replacement."""
    if m < 1:
        raise BadArgument("subset size must be >= 1")
    n = _count(cloud)
    if m >= n:
        return SparseSubset(np.arange(n, dtype=np.int64))
    rng = np.random.default_rng(seed)
    return SparseSubset(np.sort(rng.choice(n, size=m, replace=False)).astype(np.int64))


def covering_subsets(cloud, m, min_cover, seed=0):
    """Random subsets drawn until every point appears in at least ``min_cover`` of them."""
    if min_cover < 1:
        raise BadArgument("min_cover must be >= 1")
    n = _count(cloud)
    if n == 0:
        raise EmptyInput("empty cloud")
    seeds = np.random.SeedSequence(seed)
    cover = np.zeros(n, dtype=np.int64)
    subsets = []
    while cover.min() < min_cover:
        sub = random_subset(n, m, seed=seeds.spawn(1)[0])
        cover[sub.indices] += 1
        subsets.append(sub)
    return subsets


def coverage(subsets, n):
    cover = np.zeros(n, dtype=np.int64)
    for s in subsets:
        cover[s.indices] += 1
    return cover
