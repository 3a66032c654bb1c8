"""Mesh and point-cloud primitives, synthetic shapes, sampling and GT occupancy."""

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import kernels, mcubes
from .errors import BadArgument, EmptyInput, NotWatertight

log = logging.getLogger(__name__)

MIN_FACE_AREA = 1e-12
# generic default ray; axis-aligned rays graze edges of axis-aligned meshes
DEFAULT_RAY = np.array([0.8506508083520399, 0.4253254041760200, 0.3090169943749474])


class PointCloud:
    """Unordered 3D points with optional unit normals."""

    def __init__(self, points, normals=None):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(points).all():
            raise BadArgument("point coordinates must be finite")
        if normals is not None:
            normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
            if len(normals) != len(points):
                raise BadArgument("normals must align 1:1 with points")
            if len(normals) and np.abs(np.linalg.norm(normals, axis=1) - 1.0).max() > 1e-4:
                raise BadArgument("normals must have unit length")
        self.points = points
        self.normals = normals

    def __len__(self):
        return len(self.points)


class TriangleMesh:
    """Indexed triangle surface.

    ``min_area`` rejects degenerate faces at construction; pass ``None`` for
    meshes produced internally (e.g. by marching cubes) that may contain
    slivers.
    """

    def __init__(self, vertices, faces, min_area=MIN_FACE_AREA):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise BadArgument("triangle index out of range")
        if min_area is not None and len(self.faces) and self.face_areas.min() <= min_area:
            raise BadArgument(f"degenerate triangle (area <= {min_area:g})")

    def __len__(self):
        return len(self.faces)

    @property
    def is_empty(self):
        return len(self.faces) == 0

    @cached_property
    def _cross(self):
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return np.cross(b - a, c - a)

    @cached_property
    def face_areas(self):
        return 0.5 * np.linalg.norm(self._cross, axis=1)

    @cached_property
    def face_normals(self):
        norm = np.linalg.norm(self._cross, axis=1, keepdims=True)
        return self._cross / np.where(norm > 0, norm, 1.0)

    @cached_property
    def edge_counts(self):
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0, return_counts=True)

    @cached_property
    def is_watertight(self):
        if self.is_empty:
            return True
        return bool((self.edge_counts[1] == 2).all())

    def euler_characteristic(self):
        return len(np.unique(self.faces)) - len(self.edge_counts[0]) + len(self.faces)

    def signed_volume(self):
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def bounds(self):
        used = self.vertices[np.unique(self.faces)] if len(self.faces) else self.vertices
        return used.min(axis=0), used.max(axis=0)

    def largest_side(self):
        lo, hi = self.bounds()
        return float((hi - lo).max())

    def transformed(self, matrix=None, offset=None):
        v = self.vertices if matrix is None else self.vertices @ np.asarray(matrix).T
        if offset is not None:
            v = v + np.asarray(offset)
        return TriangleMesh(v, self.faces, min_area=None)


@dataclass(frozen=True)
class Similarity:
    """Uniform scale plus translation: ``x' = scale * x + offset``."""

    scale: float
    offset: np.ndarray

    def apply(self, x):
        return self.scale * np.asarray(x, dtype=np.float64) + self.offset

    def inverse(self):
        return Similarity(1.0 / self.scale, -self.offset / self.scale)


@dataclass(frozen=True)
class NoiseConfig:
    """Gaussian scan noise with standard deviation relative to the largest bbox side."""

    sigma_rel: float = 0.0
    mode: str = "fixed"  # fixed | uniform
    sigma_max_rel: float = 0.05

    def __post_init__(self):
        if self.mode not in ("fixed", "uniform"):
            raise BadArgument(f"unknown noise mode {self.mode!r}")
        if self.sigma_rel < 0 or self.sigma_max_rel < 0:
            raise BadArgument("noise sigma must be non-negative")

    def draw_sigma_rel(self, rng):
        if self.mode == "uniform":
            return float(rng.uniform(0.0, self.sigma_max_rel))
        return float(self.sigma_rel)


NOISE_PRESETS = {
    "none": NoiseConfig(0.0),
    "med": NoiseConfig(0.01),
    "high": NoiseConfig(0.05),
    "var": NoiseConfig(0.0, mode="uniform", sigma_max_rel=0.05),
}


@dataclass
class OrientedSamples:
    """Surface samples with the unit normal of their originating face."""

    positions: np.ndarray
    normals: np.ndarray
    faces: np.ndarray

    def __len__(self):
        return len(self.positions)


def normalize_to_unit_cube(mesh):
    """Scale so the largest bbox side is 1 and center the bbox in ``[0, 1]^3``."""
    if mesh.is_empty or len(mesh.vertices) == 0:
        raise EmptyInput("cannot normalize an empty mesh")
    lo, hi = mesh.bounds()
    side = float((hi - lo).max())
    if side <= 0:
        raise BadArgument("mesh has zero extent")
    scale = 1.0 / side
    tf = Similarity(scale, 0.5 - scale * 0.5 * (lo + hi))
    return TriangleMesh(tf.apply(mesh.vertices), mesh.faces, min_area=None), tf


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _uv_sphere(center, radius, res):
    n_lat, n_lon = res, 2 * res
    theta = np.pi * np.arange(1, n_lat) / n_lat
    phi = 2 * np.pi * np.arange(n_lon) / n_lon
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    ring = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1).reshape(-1, 3)
    unit = np.vstack([[0.0, 0.0, 1.0], ring, [0.0, 0.0, -1.0]])
    south = len(unit) - 1

    def vid(i, j):
        return 1 + i * n_lon + (j % n_lon)

    faces = []
    for j in range(n_lon):
        faces.append((0, vid(0, j), vid(0, j + 1)))
        faces.append((south, vid(n_lat - 2, j + 1), vid(n_lat - 2, j)))
    for i in range(n_lat - 2):
        for j in range(n_lon):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            faces.append((a, b, c))
            faces.append((a, c, d))
    return np.asarray(center) + radius * unit, np.asarray(faces)


def _box(center, size):
    corners = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    faces = np.array(
        [
            [0, 1, 3], [0, 3, 2],  # x-
            [4, 6, 7], [4, 7, 5],  # x+
            [0, 4, 5], [0, 5, 1],  # y-
            [2, 3, 7], [2, 7, 6],  # y+
            [0, 2, 6], [0, 6, 4],  # z-
            [1, 5, 7], [1, 7, 3],  # z+
        ]
    )
    return np.asarray(center) + corners * np.asarray(size), faces


def _torus(center, major, minor, res):
    n_u, n_v = 2 * res, res
    u = 2 * np.pi * np.arange(n_u) / n_u
    v = 2 * np.pi * np.arange(n_v) / n_v
    uu, vv = np.meshgrid(u, v, indexing="ij")
    r = major + minor * np.cos(vv)
    verts = np.stack([r * np.cos(uu), r * np.sin(uu), minor * np.sin(vv)], axis=-1).reshape(-1, 3)

    def vid(i, j):
        return (i % n_u) * n_v + (j % n_v)

    faces = []
    for i in range(n_u):
        for j in range(n_v):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            faces.append((a, b, c))
            faces.append((a, c, d))
    return np.asarray(center) + verts, np.asarray(faces)


def _sphere_union(centers, radii, res):
    centers = np.asarray(centers, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    lo = (centers - radii[:, None]).min(axis=0)
    hi = (centers + radii[:, None]).max(axis=0)
    pad = 0.1 * float((hi - lo).max())
    lo, hi = lo - pad, hi + pad
    side = float((hi - lo).max())
    n = 2 * res + 1
    g = np.linspace(0.0, side, n)
    grid = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1) + lo
    sdf = np.min(
        [np.linalg.norm(grid - c, axis=-1) - r for c, r in zip(centers, radii)],
        axis=0,
    )
    flat = sdf.reshape(-1)
    cells = mcubes.full_grid_cells(n)
    corners = mcubes.cell_corners(cells, n)
    inside = flat[corners] < 0.0
    active = inside.any(axis=1) & ~inside.all(axis=1)
    cells, inside = cells[active], inside[active]
    tri = mcubes.triangulate(cells, inside, n)
    keys = mcubes.crossing_edges(cells, inside, n)
    pos = mcubes.linear_crossings(keys, lambda c: flat[c], 0.0, n, 0.0, side, clamp=0.02)
    verts, faces = mcubes.assemble(tri, (keys, pos))
    return verts + lo, faces


def make_primitive(kind, resolution=32, **params):
    """Closed, outward-oriented primitive mesh.

    Kinds: ``sphere`` (center, radius), ``box`` (center, size; always 12
    triangles), ``torus`` (center, major, minor; z axis) and
    ``union-of-two-spheres`` (centers, radii; meshed by marching cubes on the
    exact distance field).
    """
    if resolution < 3:
        raise BadArgument("resolution must be >= 3")
    center = params.pop("center", (0.5, 0.5, 0.5))
    if kind == "sphere":
        v, f = _uv_sphere(center, params.pop("radius", 0.4), resolution)
    elif kind == "box":
        v, f = _box(center, params.pop("size", (0.6, 0.6, 0.6)))
    elif kind == "torus":
        v, f = _torus(center, params.pop("major", 0.3), params.pop("minor", 0.1), resolution)
    elif kind in ("union-of-two-spheres", "union"):
        centers = params.pop("centers", ((0.38, 0.5, 0.5), (0.62, 0.5, 0.5)))
        radii = params.pop("radii", (0.25, 0.25))
        v, f = _sphere_union(centers, radii, resolution)
    else:
        raise BadArgument(f"unsupported primitive kind {kind!r}")
    if params:
        raise BadArgument(f"unexpected parameters for {kind}: {sorted(params)}")
    return TriangleMesh(v, f)


# Eight in-cube primitives with varied parameters; kept inside [0, 1]^3 with a
# margin so a reconstruction grid over the unit cube never clips them.
FIXTURE_SHAPES = (
    ("sphere_a", "sphere", {"radius": 0.4}),
    ("sphere_b", "sphere", {"center": (0.45, 0.52, 0.5), "radius": 0.3}),
    ("box_a", "box", {"size": (0.6, 0.6, 0.6)}),
    ("box_b", "box", {"size": (0.7, 0.45, 0.35)}),
    ("torus_a", "torus", {"major": 0.3, "minor": 0.1}),
    ("torus_b", "torus", {"major": 0.28, "minor": 0.14}),
    ("union_a", "union", {}),
    ("union_b", "union", {"centers": ((0.35, 0.45, 0.5), (0.62, 0.58, 0.52)), "radii": (0.22, 0.18)}),
)


def fixture_meshes(kinds=None, resolution=32):
    """``[(shape_id, mesh)]`` for the fixture, optionally filtered by id or kind."""
    out = []
    for shape_id, kind, params in FIXTURE_SHAPES:
        if kinds is None or shape_id in kinds or kind in kinds:
            out.append((shape_id, make_primitive(kind, resolution, **dict(params))))
    if not out:
        raise BadArgument(f"no fixture shape matches {sorted(kinds)}")
    return out


# ---------------------------------------------------------------------------
# sampling and occupancy
# ---------------------------------------------------------------------------


def sample_surface(mesh, n, seed=0):
    """Area-uniform surface samples with face normals; deterministic per seed."""
    if n < 1:
        raise BadArgument("sample count must be >= 1")
    if mesh.is_empty:
        raise EmptyInput("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(mesh.face_areas)
    u = rng.random(n) * cdf[-1]
    face = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    w = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    tri = mesh.vertices[mesh.faces[face]]
    pos = np.einsum("nk,nkd->nd", w, tri)
    return OrientedSamples(pos, mesh.face_normals[face], face)


def check_watertight(mesh):
    if not mesh.is_watertight:
        raise NotWatertight("mesh has boundary or non-manifold edges")


def occupancy_oracle(mesh, x, seed=0, max_retries=16, direction=None):
    """1 where ``x`` is inside the closed surface, else 0.

    Ray parity along ``direction`` (a fixed generic ray by default). Queries
    whose ray passes within 1e-9 of an edge or vertex are retried with random
    directions drawn from ``seed``.
    """
    check_watertight(mesh)
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 1
    pts = x.reshape(-1, 3)
    out = np.zeros(len(pts), dtype=np.int8)
    if mesh.is_empty or len(pts) == 0:
        return int(out[0]) if scalar else out
    rng = np.random.default_rng(seed)
    pending = np.arange(len(pts))
    d = DEFAULT_RAY if direction is None else np.asarray(direction, dtype=np.float64)
    for _ in range(max_retries + 1):
        cross, grazed = kernels.ray_crossings(pts[pending], mesh.vertices, mesh.faces, d)
        ok = ~grazed
        out[pending[ok]] = cross[ok] % 2
        pending = pending[grazed]
        if len(pending) == 0:
            break
        d = rng.normal(size=3)
    if len(pending):
        log.debug("%d queries grazed every ray; labelled outside", len(pending))
    return int(out[0]) if scalar else out


def synth_scan(mesh, n, noise=None, seed=0):
    """Unoriented noisy scan: surface samples plus isotropic Gaussian noise.

    The noise std is ``sigma_rel * L`` with ``L`` the largest bbox side of
    ``mesh`` (1 for normalized meshes).
    """
    noise = noise or NoiseConfig()
    rng = np.random.default_rng(seed)
    sigma_rel = noise.draw_sigma_rel(rng)
    pts = sample_surface(mesh, n, seed=rng.integers(2**63)).positions
    if sigma_rel > 0:
        pts = pts + rng.normal(scale=sigma_rel * mesh.largest_side(), size=pts.shape)
    return PointCloud(pts)


def realized_sigma_rel(noise, seed):
    """The relative sigma :func:`synth_scan` uses for ``seed``."""
    return noise.draw_sigma_rel(np.random.default_rng(seed))


def synth_fixture(kinds=None, noise="med", n_points=3000, seed=0):
    """``[(shape_id, mesh, cloud, sigma_rel)]``: the fixture shapes with one scan each.

    Per-shape scan seeds are spawned from ``seed``, so adding a shape to the
    filter does not change the scans of the others.
    """
    if isinstance(noise, str):
        if noise not in NOISE_PRESETS:
            raise BadArgument(f"unknown noise preset {noise!r}; choose from {sorted(NOISE_PRESETS)}")
        noise = NOISE_PRESETS[noise]
    spawned = np.random.SeedSequence(seed).spawn(len(FIXTURE_SHAPES))
    slot = {shape_id: i for i, (shape_id, _, _) in enumerate(FIXTURE_SHAPES)}
    out = []
    for sid, mesh in fixture_meshes(kinds):
        shape_seed = int(spawned[slot[sid]].generate_state(1)[0])
        out.append((sid, mesh, synth_scan(mesh, n_points, noise, seed=shape_seed), float(realized_sigma_rel(noise, shape_seed))))
    return out


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def write_obj(path, mesh):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for v in mesh.vertices:
            fh.write("v %r %r %r\n" % (float(v[0]), float(v[1]), float(v[2])))
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def read_obj(path, min_area=MIN_FACE_AREA):
    verts, faces = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(t) for t in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(t.split("/")[0]) - 1 for t in parts[1:]]
                faces.extend((idx[0], idx[i], idx[i + 1]) for i in range(1, len(idx) - 1))
    return TriangleMesh(np.asarray(verts).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3), min_area)


def write_xyz(path, cloud):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in cloud.points:
            fh.write("%r %r %r\n" % (float(p[0]), float(p[1]), float(p[2])))


def read_xyz(path):
    pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    return PointCloud(pts[:, :3])
