"""Marching-cubes triangulation on an integer lattice.

Vertices are identified by *edge keys*: the lattice edge from corner ``c``
along axis ``a`` has key ``3 * c + a`` where ``c`` is the linear index of its
lower corner in an ``R x R x R`` lattice. Triangulation only needs inside/outside
flags per corner; where a vertex sits along its edge is decided by the caller.
"""

import numpy as np

from ._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE

# lower corner offset and axis of each of the 12 cell edges
_EDGE_LOWER = np.minimum(CORNER_OFFSETS[EDGE_CORNERS[:, 0]], CORNER_OFFSETS[EDGE_CORNERS[:, 1]])
_EDGE_AXIS = np.argmax(CORNER_OFFSETS[EDGE_CORNERS[:, 0]] != CORNER_OFFSETS[EDGE_CORNERS[:, 1]], axis=1)

# with "bit set = outside" the table already winds triangles outward
_TRI = TRI_TABLE
_NTRI = (TRI_TABLE >= 0).sum(axis=1) // 3


def corner_index(ijk, res):
    ijk = np.asarray(ijk, dtype=np.int64)
    return (ijk[..., 0] * res + ijk[..., 1]) * res + ijk[..., 2]


def corner_coords(index, res):
    index = np.asarray(index, dtype=np.int64)
    return np.stack([index // (res * res), (index // res) % res, index % res], axis=-1)


def cell_corners(cells, res):
    """Linear corner indices ``(C, 8)`` of each cell ``(C, 3)``."""
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    return corner_index(cells[:, None, :] + CORNER_OFFSETS[None, :, :], res)


def case_index(inside):
    """Table row for each cell given ``(C, 8)`` inside flags."""
    outside = ~np.asarray(inside, dtype=bool)
    return (outside.astype(np.int64) << np.arange(8)).sum(axis=1)


def edge_endpoints(keys, res):
    """Lower and upper corner linear indices of each edge key."""
    keys = np.asarray(keys, dtype=np.int64)
    lower = keys // 3
    axis = keys % 3
    step = np.array([res * res, res, 1], dtype=np.int64)
    return lower, lower + step[axis]


def triangulate(cells, inside, res):
    """Triangles as edge-key triples ``(T, 3)`` for the given cells.

    ``cells`` is ``(C, 3)`` lower-corner coordinates and ``inside`` the matching
    ``(C, 8)`` corner flags. Output follows the input cell order, and within a
    cell the table order, so sorted cell input gives a canonical triangle list.
    """
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    cases = case_index(inside)
    ntri = _NTRI[cases]
    keep = ntri > 0
    if not keep.any():
        return np.zeros((0, 3), dtype=np.int64)
    cells, cases, ntri = cells[keep], cases[keep], ntri[keep]
    rows = _TRI[cases]  # (C, 16)
    owner = np.repeat(np.arange(len(cells)), ntri)
    slot = np.arange(ntri.sum()) - np.repeat(np.cumsum(ntri) - ntri, ntri)
    edges = rows[owner[:, None], 3 * slot[:, None] + np.arange(3)[None, :]]  # (T, 3)
    lower = cells[owner][:, None, :] + _EDGE_LOWER[edges]
    return 3 * corner_index(lower, res) + _EDGE_AXIS[edges]


def crossing_edges(cells, inside, res):
    """Sorted unique keys of lattice edges whose endpoints disagree."""
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    inside = np.asarray(inside, dtype=bool)
    a = inside[:, EDGE_CORNERS[:, 0]]
    b = inside[:, EDGE_CORNERS[:, 1]]
    ci, ei = np.nonzero(a != b)
    lower = cells[ci] + _EDGE_LOWER[ei]
    return np.unique(3 * corner_index(lower, res) + _EDGE_AXIS[ei])


def assemble(tri_keys, key_positions):
    """Index a triangle soup keyed by edges into ``(vertices, faces)``.

    ``key_positions`` maps sorted unique edge keys to positions, given as a
    ``(keys, positions)`` pair. Vertex order follows ascending edge key.
    """
    keys, positions = key_positions
    faces = np.searchsorted(keys, tri_keys)
    return np.asarray(positions, dtype=np.float64), faces.astype(np.int64)


def linear_crossings(keys, corner_values, level, res, lo=0.0, hi=1.0, clamp=1e-6):
    """Vertex positions by linear interpolation of corner values.

    ``corner_values`` is a callable mapping linear corner indices to values.
    Returns positions of ``keys`` in ``[lo, hi]^3`` world coordinates.
    """
    c0, c1 = edge_endpoints(keys, res)
    v0 = corner_values(c0)
    v1 = corner_values(c1)
    t = np.clip((level - v0) / (v1 - v0), clamp, 1.0 - clamp)
    p0 = corner_coords(c0, res).astype(np.float64)
    p1 = corner_coords(c1, res).astype(np.float64)
    h = (hi - lo) / (res - 1)
    return lo + h * (p0 + t[:, None] * (p1 - p0))


def full_grid_cells(res):
    """All cell lower corners of an ``res^3`` lattice in linear order."""
    r = np.arange(res - 1)
    return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)


def extract_dense(values, level=0.0, inside_above=False, lo=0.0, hi=1.0):
    """Isosurface of a dense ``(R, R, R)`` sample array with linear crossings.

    Corners count as inside when ``values < level`` (signed-distance
    convention) or, with ``inside_above``, when ``values >= level``.
    """
    values = np.asarray(values, dtype=np.float64)
    res = values.shape[0]
    flat = values.reshape(-1)
    cells = full_grid_cells(res)
    corners = cell_corners(cells, res)
    inside = flat[corners] >= level if inside_above else flat[corners] < level
    active = inside.any(axis=1) & ~inside.all(axis=1)
    cells, inside = cells[active], inside[active]
    tri = triangulate(cells, inside, res)
    keys = crossing_edges(cells, inside, res)
    pos = linear_crossings(keys, lambda c: flat[c], level, res, lo, hi)
    return assemble(tri, (keys, pos))
