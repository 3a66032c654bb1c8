"""Surface extraction from a trained occupancy network.

Per-point global features are averaged over several random sparse subsets
that together cover every input point a minimum number of times. The 0.5
level set of the resulting field is then meshed with marching cubes, visiting
only cells reachable from the input points through surface-crossing faces and
refining each crossing by sampling extra points along its edge.
"""

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import mcubes
from .autodiff import Tensor
from .errors import BadArgument, EmptySurface
from .geom import TriangleMesh
from .model import global_encode, occupancy_forward
from .spatial import KnnIndex, covering_subsets, extract_patches

log = logging.getLogger(__name__)

LEVEL = 0.5


class FieldEvaluator:
    """Occupancy probability ``o(x)`` for one input cloud.

    Calling the evaluator with ``(Q, 3)`` positions returns ``(Q,)``
    probabilities in float64. ``evaluations`` counts queried positions.
    """

    def __init__(self, params, cloud, min_cover=10, m=None, seed=0, chunk=2048):
        cfg = params.cfg
        self.params = params
        self.points = np.array(getattr(cloud, "points", cloud), dtype=np.float64).reshape(-1, 3)
        self.index = KnnIndex(self.points)
        m = cfg.sparse_size if m is None else m
        self.subsets = covering_subsets(len(self.points), m, min_cover, seed)
        self.chunk = chunk
        self.evaluations = 0
        self.features = None
        if cfg.branches != "local":
            # f64 accumulation: identical subsets average back to the exact input
            acc = np.zeros((len(self.points), cfg.global_latent))
            count = np.zeros(len(self.points))
            with ad.no_grad():
                for sub in self.subsets:
                    acc[sub.indices] += global_encode(params, self.points[sub.indices]).data
                    count[sub.indices] += 1
            self.features = Tensor((acc / count[:, None]).astype(np.float32))

    @property
    def coverage(self):
        cover = np.zeros(len(self.points), dtype=np.int64)
        for sub in self.subsets:
            cover[sub.indices] += 1
        return cover

    def logits(self, x):
        cfg = self.params.cfg
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(x))
        with ad.no_grad():
            for start in range(0, len(x), self.chunk):
                xs = x[start : start + self.chunk]
                patches = (extract_patches(self.index, xs, cfg.patch_k, cfg.patch_center).normalized_points
                           if cfg.branches != "global" else None)
                logit, _ = occupancy_forward(self.params, xs, self.points, self.features, patches, self.index)
                out[start : start + len(xs)] = logit.data
        self.evaluations += len(x)
        return out

    def __call__(self, x):
        return ad.sigmoid(self.logits(x)).astype(np.float64)


def build_evaluator(params, cloud, min_cover=10, m=None, seed=0):
    return FieldEvaluator(params, cloud, min_cover=min_cover, m=m, seed=seed)


class OccupancyGrid:
    """Lazily evaluated corner values of an ``R^3`` lattice over ``[lo, hi]^3``.

    Each corner is evaluated at most once; later lookups return the cached
    value unchanged.
    """

    def __init__(self, field, res, lo=0.0, hi=1.0):
        if res < 3:
            raise BadArgument("grid resolution must be >= 3")
        self.field = field
        self.res = res
        self.lo = float(lo)
        self.hi = float(hi)
        self.cache = {}
        self.lookups = 0

    @property
    def spacing(self):
        return (self.hi - self.lo) / (self.res - 1)

    @property
    def corners_evaluated(self):
        return len(self.cache)

    def positions(self, corners):
        return self.lo + self.spacing * mcubes.corner_coords(corners, self.res).astype(np.float64)

    def values(self, corners):
        """Values at linear corner indices (any shape); missing ones are evaluated in one batch."""
        corners = np.asarray(corners, dtype=np.int64)
        flat = corners.reshape(-1)
        self.lookups += flat.size
        uniq = np.unique(flat)
        missing = np.array([c for c in uniq.tolist() if c not in self.cache], dtype=np.int64)
        if len(missing):
            vals = np.asarray(self.field(self.positions(missing)), dtype=np.float64).reshape(-1)
            self.cache.update(zip(missing.tolist(), vals.tolist()))
        out = np.array([self.cache[c] for c in flat.tolist()], dtype=np.float64)
        return out.reshape(corners.shape)


def eval_grid_cell(grid, cell):
    """The 8 corner values of ``cell`` (lower-corner coordinates), in table order."""
    cell = np.asarray(cell, dtype=np.int64).reshape(1, 3)
    if (cell < 0).any() or (cell > grid.res - 2).any():
        raise BadArgument(f"cell {cell[0].tolist()} outside the grid")
    return grid.values(mcubes.cell_corners(cell, grid.res))[0]


@dataclass
class Reconstruction:
    mesh: TriangleMesh
    cells_evaluated: int
    corners_evaluated: int
    edge_samples: int
    watertight: bool
    clipped: bool

    @property
    def triangles(self):
        return len(self.mesh.faces)


def seed_cells(points, res, lo=0.0, hi=1.0):
    """Cells containing ``points`` dilated by their 26-neighbourhood, as sorted linear cell ids."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n_cells = res - 1
    ijk = np.floor((points - lo) / (hi - lo) * n_cells).astype(np.int64)
    ijk = np.unique(np.clip(ijk, 0, n_cells - 1), axis=0)
    offsets = np.stack(np.meshgrid(*[np.arange(-1, 2)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    dilated = np.clip((ijk[:, None, :] + offsets[None]).reshape(-1, 3), 0, n_cells - 1)
    return np.unique(_cell_id(dilated, n_cells))


def _cell_id(ijk, n_cells):
    return (ijk[..., 0] * n_cells + ijk[..., 1]) * n_cells + ijk[..., 2]


def _cell_ijk(ids, n_cells):
    return np.stack([ids // (n_cells * n_cells), (ids // n_cells) % n_cells, ids % n_cells], axis=-1)


# corner slots of each cell face and the neighbour offset across it
_FACES = (
    ((0, 3, 4, 7), (-1, 0, 0)),
    ((1, 2, 5, 6), (1, 0, 0)),
    ((0, 1, 4, 5), (0, -1, 0)),
    ((2, 3, 6, 7), (0, 1, 0)),
    ((0, 1, 2, 3), (0, 0, -1)),
    ((4, 5, 6, 7), (0, 0, 1)),
)


def grow_active_cells(grid, start_ids):
    """Breadth-first growth from ``start_ids`` across faces that straddle the level.

    Returns ``(active_ids, visited_count)``; active ids are sorted.
    """
    n_cells = grid.res - 1
    visited = np.zeros(n_cells**3, dtype=bool)
    frontier = np.unique(np.asarray(start_ids, dtype=np.int64))
    visited[frontier] = True
    active = []
    while len(frontier):
        ijk = _cell_ijk(frontier, n_cells)
        inside = grid.values(mcubes.cell_corners(ijk, grid.res)) > LEVEL
        is_active = inside.any(axis=1) & ~inside.all(axis=1)
        active.append(frontier[is_active])
        nxt = []
        for slots, off in _FACES:
            f = inside[:, list(slots)]
            cross = is_active & f.any(axis=1) & ~f.all(axis=1)
            nb = ijk[cross] + np.asarray(off)
            ok = ((nb >= 0) & (nb < n_cells)).all(axis=1)
            nxt.append(_cell_id(nb[ok], n_cells))
        nxt = np.unique(np.concatenate(nxt)) if nxt else np.zeros(0, dtype=np.int64)
        nxt = nxt[~visited[nxt]]
        visited[nxt] = True
        frontier = nxt
    active = np.sort(np.concatenate(active)) if active else np.zeros(0, dtype=np.int64)
    return active, int(visited.sum())


def edge_crossings(grid, keys, supersamples=8, clamp=1e-6):
    """Positions of the level crossing on each edge key, plus the number of extra samples.

    The edge is sampled at ``t = j / s`` for ``j = 0..s`` (the end points come
    from the corner cache) and the first consecutive pair bracketing the
    level, counted from the lower corner, is linearly interpolated.
    """
    if supersamples < 1:
        raise BadArgument("supersamples must be >= 1")
    s = supersamples
    c0, c1 = mcubes.edge_endpoints(keys, grid.res)
    p0 = grid.positions(c0)
    p1 = grid.positions(c1)
    samples = np.empty((len(keys), s + 1))
    samples[:, 0] = grid.values(c0)
    samples[:, s] = grid.values(c1)
    extra = 0
    if s > 1 and len(keys):
        t_in = np.arange(1, s) / s
        pos = p0[:, None, :] + t_in[None, :, None] * (p1 - p0)[:, None, :]
        samples[:, 1:s] = np.asarray(grid.field(pos.reshape(-1, 3)), dtype=np.float64).reshape(len(keys), s - 1)
        extra = pos.shape[0] * pos.shape[1]
    above = samples > LEVEL
    flips = above[:, :-1] != above[:, 1:]
    j = np.argmax(flips, axis=1)
    rows = np.arange(len(keys))
    f0 = samples[rows, j]
    f1 = samples[rows, j + 1]
    t = (j + (LEVEL - f0) / (f1 - f0)) / s
    t = np.clip(t, clamp, 1.0 - clamp)
    return p0 + t[:, None] * (p1 - p0), extra


def _mesh_from_cells(grid, active_ids, supersamples):
    n_cells = grid.res - 1
    cells = _cell_ijk(active_ids, n_cells)
    inside = grid.values(mcubes.cell_corners(cells, grid.res)) > LEVEL
    tri = mcubes.triangulate(cells, inside, grid.res)
    keys = mcubes.crossing_edges(cells, inside, grid.res)
    pos, extra = edge_crossings(grid, keys, supersamples)
    verts, faces = mcubes.assemble(tri, (keys, pos))
    return TriangleMesh(verts, faces, min_area=None), cells, extra


def _touches_boundary(cells, res):
    return bool(len(cells)) and bool(((cells == 0) | (cells == res - 2)).any())


def region_growing_mc(field, res, seeds, supersamples=8, lo=0.0, hi=1.0):
    """Mesh the 0.5 level set of ``field`` by region growing from ``seeds``.

    ``field`` maps ``(Q, 3)`` positions to values in ``[0, 1]``. Raises
    :class:`EmptySurface` (with an empty ``result`` attached) when no seeded
    cell straddles the level.
    """
    grid = field if isinstance(field, OccupancyGrid) else OccupancyGrid(field, res, lo, hi)
    active, visited = grow_active_cells(grid, seed_cells(seeds, grid.res, grid.lo, grid.hi))
    return _finish(grid, active, visited, supersamples)


def full_grid_mc(field, res, supersamples=8, lo=0.0, hi=1.0):
    """Exhaustive counterpart of :func:`region_growing_mc`: every cell is visited."""
    grid = field if isinstance(field, OccupancyGrid) else OccupancyGrid(field, res, lo, hi)
    n_cells = grid.res - 1
    ids = np.arange(n_cells**3, dtype=np.int64)
    inside = grid.values(mcubes.cell_corners(_cell_ijk(ids, n_cells), grid.res)) > LEVEL
    active = ids[inside.any(axis=1) & ~inside.all(axis=1)]
    return _finish(grid, active, len(ids), supersamples)


def _finish(grid, active, visited, supersamples):
    if len(active) == 0:
        empty = Reconstruction(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), min_area=None),
                               visited, grid.corners_evaluated, 0, False, False)
        exc = EmptySurface("no grid cell straddles the 0.5 level")
        exc.result = empty
        raise exc
    mesh, cells, extra = _mesh_from_cells(grid, active, supersamples)
    clipped = _touches_boundary(cells, grid.res)
    watertight = mesh.is_watertight
    if clipped:
        log.warning("surface reaches the grid boundary; mesh may be open")
    return Reconstruction(mesh, visited, grid.corners_evaluated, extra, watertight, clipped)


def reconstruct(params, cloud, res=65, min_cover=10, supersamples=8, seed=0, m=None):
    """Mesh the 0.5 level set of the network's field for ``cloud``."""
    evaluator = build_evaluator(params, cloud, min_cover=min_cover, m=m, seed=seed)
    return region_growing_mc(evaluator, res, evaluator.points, supersamples)


REPORT_COLUMNS = ("shape_id", "cells_evaluated", "corners_evaluated", "triangles", "watertight")


def write_report(path, rows):
    """``rows``: ``(shape_id, Reconstruction)`` pairs."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for shape_id, r in rows:
            w.writerow([shape_id, r.cells_evaluated, r.corners_evaluated, r.triangles, int(r.watertight)])
