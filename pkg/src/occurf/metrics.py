"""Mesh comparison metrics: Chamfer distance, volumetric IoU and F1, normal error."""

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import BadArgument, EmptyInput
from .geom import check_watertight, occupancy_oracle, sample_surface
from .spatial import KnnIndex


def _positions(s):
    pts = getattr(s, "positions", getattr(s, "points", s))
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyInput("empty point set")
    return pts


def nearest_sq(src, dst):
    """Squared distance from each ``src`` point to its nearest ``dst`` point, and that index."""
    idx, d2 = KnnIndex(dst).query(src, 1)
    return d2[:, 0], idx[:, 0]


def chamfer(a, b):
    """Mean squared nearest-neighbour distance A to B plus B to A (unscaled)."""
    a, b = _positions(a), _positions(b)
    ab, _ = nearest_sq(a, b)
    ba, _ = nearest_sq(b, a)
    # two separately rounded means keep the result symmetric bit for bit
    return float(ab.mean()) + float(ba.mean())


@dataclass(frozen=True)
class VolumeCounts:
    n: int
    both: int
    gt_only: int
    recon_only: int

    @property
    def gt(self):
        return self.both + self.gt_only

    @property
    def recon(self):
        return self.both + self.recon_only

    @property
    def iou(self):
        union = self.both + self.gt_only + self.recon_only
        return 1.0 if union == 0 else self.both / union

    @property
    def precision(self):
        return 0.0 if self.recon == 0 else self.both / self.recon

    @property
    def recall(self):
        return 0.0 if self.gt == 0 else self.both / self.gt

    @property
    def f1(self):
        p, r = self.precision, self.recall
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def volume_counts(gt_mesh, recon_mesh, n=100000, seed=0):
    """Classify ``n`` uniform samples of the unit cube against both meshes."""
    check_watertight(gt_mesh)
    check_watertight(recon_mesh)
    x = np.random.default_rng(seed).random((n, 3))
    a = occupancy_oracle(gt_mesh, x, seed=seed).astype(bool)
    b = occupancy_oracle(recon_mesh, x, seed=seed).astype(bool)
    return VolumeCounts(n, int((a & b).sum()), int((a & ~b).sum()), int((~a & b).sum()))


def iou_mc(gt_mesh, recon_mesh, n=100000, seed=0):
    return volume_counts(gt_mesh, recon_mesh, n, seed).iou


def f1_volumetric(gt_mesh, recon_mesh, n=100000, seed=0):
    return volume_counts(gt_mesh, recon_mesh, n, seed).f1


def normal_error(a, b):
    """Mean angle (radians) between each B normal and the normal of its nearest A sample."""
    na, nb = getattr(a, "normals", None), getattr(b, "normals", None)
    if na is None or nb is None:
        raise BadArgument("normal error needs samples with normals")
    _, idx = nearest_sq(_positions(b), _positions(a))
    dots = np.einsum("ij,ij->i", np.asarray(nb, dtype=np.float64), np.asarray(na, dtype=np.float64)[idx])
    return float(np.arccos(np.clip(dots, -1.0, 1.0)).mean())


@dataclass
class MetricReport:
    chamfer_x100: float
    iou: float
    f1: float
    normal_error: float
    n_s: int
    seed: int
    shape_id: str = ""
    status: str = "ok"


def evaluate(gt_mesh, recon_mesh, n_s=10000, seed=0):
    """All four metrics from one seed: surface samples of both meshes and volume samples."""
    a = sample_surface(gt_mesh, n_s, seed=seed)
    b = sample_surface(recon_mesh, n_s, seed=seed)
    counts = volume_counts(gt_mesh, recon_mesh, n_s, seed)
    return MetricReport(100.0 * chamfer(a, b), counts.iou, counts.f1, normal_error(a, b), n_s, seed)


REPORT_COLUMNS = ("shape_id", "chamfer_x100", "iou", "f1", "normal_error", "n_s", "seed")


def mean_report(reports, n_s, seed):
    ok = [r for r in reports if r.status == "ok"]
    if not ok:
        nan = float("nan")
        return MetricReport(nan, nan, nan, nan, n_s, seed, "mean", "no valid rows")
    cols = ("chamfer_x100", "iou", "f1", "normal_error")
    vals = {c: float(np.mean([getattr(r, c) for r in ok])) for c in cols}
    return MetricReport(**vals, n_s=n_s, seed=seed, shape_id="mean")


def write_reports(path, reports, flag_column=False):
    """Metric CSV; ``flag_column`` appends a ``status`` column for batch runs."""
    cols = REPORT_COLUMNS + (("status",) if flag_column else ())
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in reports:
            d = asdict(r)
            w.writerow([repr(float(d[c])) if isinstance(d[c], float) else d[c] for c in cols])


def read_reports(path):
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(MetricReport(
                float(row["chamfer_x100"]), float(row["iou"]), float(row["f1"]), float(row["normal_error"]),
                int(row["n_s"]), int(row["seed"]), row["shape_id"], row.get("status", "ok"),
            ))
    return out


def binomial_sigma(p, n):
    return math.sqrt(p * (1.0 - p) / n)
