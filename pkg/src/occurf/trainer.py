"""Training data, the BCE training loop and the ablation harness."""

import csv
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import config
from .errors import BadArgument, EmptyInput, NumericError
from .geom import check_watertight, occupancy_oracle, read_obj, read_xyz, sample_surface
from .model import ModelConfig, global_encode, init_params, occupancy_forward
from .spatial import KnnIndex, extract_patches, random_subset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    # desk defaults: 1024 queries per step; lr and decay points are tuned so
    # 60 epochs overfit the 8-shape fixture (full_scale() restores the large-scale recipe)
    epochs: int = 60
    milestones: tuple = (40, 52)
    gamma: float = 0.1
    batch_size: int = 4  # items per optimizer step
    queries_per_shape: int = 4096
    queries_per_item: int = 256  # queries sharing one sparse subset
    near_surface_fraction: float = 0.5
    near_surface_sigma: float = 0.02
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-5
    weight_decay: float = 1e-2
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not 0.0 <= self.near_surface_fraction <= 1.0:
            raise BadArgument("near_surface_fraction must lie in [0, 1]")
        for name in ("epochs", "batch_size", "queries_per_shape", "queries_per_item", "workers"):
            if getattr(self, name) < 1:
                raise BadArgument(f"{name} must be >= 1")
        if list(self.milestones) != sorted(self.milestones):
            raise BadArgument("milestones must be ascending")

    @classmethod
    def full_scale(cls, **overrides):
        base = dict(epochs=150, milestones=(75, 125), batch_size=50, queries_per_item=64, lr=1e-3)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return config.build(cls, d)


@dataclass(frozen=True)
class TrainingSample:
    shape_id: str
    x: np.ndarray
    gt_occupancy: int


@dataclass
class ShapeData:
    shape_id: str
    mesh: object
    cloud: object
    index: KnnIndex
    queries: np.ndarray  # (Q, 3)
    labels: np.ndarray  # (Q,) in {0, 1}


@dataclass
class Dataset:
    shapes: list

    def samples(self):
        for s in self.shapes:
            for x, y in zip(s.queries, s.labels):
                yield TrainingSample(s.shape_id, x, int(y))

    def __len__(self):
        return sum(len(s.labels) for s in self.shapes)


def sample_queries(mesh, n, near_fraction, near_sigma, rng):
    """``n`` query points: surface samples plus Gaussian offsets, then uniform fill."""
    n_near = int(round(near_fraction * n))
    near = sample_surface(mesh, n_near, seed=rng.integers(2**63)).positions if n_near else np.zeros((0, 3))
    near = near + rng.normal(scale=near_sigma, size=near.shape)
    uniform = rng.random((n - n_near, 3))
    return np.clip(np.vstack([near, uniform]), 0.0, 1.0)


def build_dataset(shapes, cfg=None, seed=None):
    """Label query points for each ``(shape_id, mesh, cloud)`` triple."""
    cfg = cfg or TrainConfig()
    if not shapes:
        raise EmptyInput("no training shapes")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    out = []
    for entry in shapes:
        shape_id, mesh, cloud = entry if len(entry) == 3 else (f"shape{len(out)}", *entry)
        check_watertight(mesh)
        q = sample_queries(mesh, cfg.queries_per_shape, cfg.near_surface_fraction, cfg.near_surface_sigma, rng)
        labels = occupancy_oracle(mesh, q, seed=int(rng.integers(2**31)))
        out.append(ShapeData(shape_id, mesh, cloud, KnnIndex(cloud), q, labels.astype(np.float64)))
    return Dataset(out)


class TrainingFailed(NumericError):
    """Non-finite value during training; ``batch`` lists ``(shape_id, query indices)``."""

    def __init__(self, message, epoch, step, batch):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.batch = batch


@dataclass
class TrainResult:
    params: object
    trace: list = field(default_factory=list)  # (epoch, mean_loss, lr)


def epoch_items(dataset, cfg, rng):
    """Shuffled ``(shape_number, query indices)`` items covering every sample once."""
    items = []
    for si, shape in enumerate(dataset.shapes):
        order = rng.permutation(len(shape.labels))
        for start in range(0, len(order), cfg.queries_per_item):
            items.append((si, order[start : start + cfg.queries_per_item]))
    perm = rng.permutation(len(items))
    return [items[i] for i in perm]


def batch_loss(params, dataset, batch, subset_seeds):
    """Mean BCE over all queries of the batch, one fresh sparse subset per item."""
    cfg = params.cfg
    logits, targets = [], []
    for (si, qi), sub_seed in zip(batch, subset_seeds):
        shape = dataset.shapes[si]
        x = shape.queries[qi]
        pts = shape.index.points
        sparse = pts[random_subset(len(pts), cfg.sparse_size, seed=sub_seed).indices]
        feats = global_encode(params, sparse) if cfg.branches != "local" else None
        patches = (extract_patches(shape.index, x, cfg.patch_k, cfg.patch_center).normalized_points
                   if cfg.branches != "global" else None)
        logit, _ = occupancy_forward(params, x, sparse, feats, patches)
        logits.append(logit)
        targets.append(shape.labels[qi])
    logit = logits[0] if len(logits) == 1 else ad.concat(logits, axis=0)
    return ad.bce_with_logits(logit, np.concatenate(targets))


def train(model_cfg, train_cfg, dataset, params=None, progress=None):
    """Fit a model; returns :class:`TrainResult` with the per-epoch loss trace."""
    if len(dataset) == 0:
        raise EmptyInput("empty dataset")
    params = params or init_params(model_cfg)
    opt = ad.AdamW(params.parameters(), lr=train_cfg.lr, betas=(train_cfg.beta1, train_cfg.beta2),
                   eps=train_cfg.eps, weight_decay=train_cfg.weight_decay)
    rng = np.random.default_rng(train_cfg.seed)
    result = TrainResult(params)
    for epoch in range(train_cfg.epochs):
        opt.lr = ad.lr_schedule(epoch, train_cfg.lr, train_cfg.milestones, train_cfg.gamma)
        items = epoch_items(dataset, train_cfg, rng)
        total, count = 0.0, 0
        for step, start in enumerate(range(0, len(items), train_cfg.batch_size)):
            batch = items[start : start + train_cfg.batch_size]
            seeds = rng.integers(2**63, size=len(batch))
            try:
                opt.zero_grad()
                loss = batch_loss(params, dataset, batch, seeds)
                ad.backward(loss)
                opt.step()
            except NumericError as exc:
                dump = [(dataset.shapes[si].shape_id, qi.tolist()) for si, qi in batch]
                raise TrainingFailed(f"epoch {epoch} step {step}: {exc}", epoch, step, dump) from exc
            n = sum(len(qi) for _, qi in batch)
            total += float(loss.data) * n
            count += n
        mean = total / count
        if not math.isfinite(mean):
            raise TrainingFailed(f"epoch {epoch}: non-finite mean loss", epoch, -1, [])
        result.trace.append((epoch, mean, opt.lr))
        if progress:
            progress(epoch, mean, opt.lr)
        log.info("epoch %d loss %.5f lr %.2e", epoch, mean, opt.lr)
    return result


def write_loss_csv(path, trace):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "lr"])
        for epoch, loss, lr in trace:
            w.writerow([epoch, repr(float(loss)), repr(float(lr))])


def read_loss_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return [(int(r["epoch"]), float(r["mean_loss"]), float(r["lr"])) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def write_manifest(path, entries):
    """``entries``: ``(shape_id, mesh_path, cloud_path)`` triples."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for shape_id, mesh_path, cloud_path in entries:
            fh.write(f"{shape_id}\t{mesh_path}\t{cloud_path}\n")


def read_manifest(path):
    import os

    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise BadArgument(f"{path}:{lineno}: expected 3 tab-separated fields")
            sid, mesh_path, cloud_path = parts
            entries.append((sid, os.path.join(base, mesh_path), os.path.join(base, cloud_path)))
    if not entries:
        raise EmptyInput(f"{path}: empty manifest")
    return entries


def load_fixture(manifest_path):
    """``[(shape_id, mesh, cloud)]`` from a manifest."""
    return [(sid, read_obj(m), read_xyz(c)) for sid, m, c in read_manifest(manifest_path)]


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

ABLATION_COLUMNS = ("variant", "shape_id", "chamfer_x100", "iou", "f1", "normal_error", "n_s", "seed", "status")

_MODEL_KEYS = set(ModelConfig.__dataclass_fields__)
_TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)


def parse_axes(spec):
    """``"patch_k=10,25;merge=sum,cat"`` (or a list of such terms) to ``{key: [values]}``."""
    terms = spec if isinstance(spec, (list, tuple)) else [t for t in spec.split(";")]
    axes = {}
    for term in terms:
        term = term.strip()
        if not term:
            continue
        if "=" not in term:
            raise BadArgument(f"malformed axis {term!r}; expected key=v1,v2")
        key, values = term.split("=", 1)
        key = key.strip()
        if key not in _MODEL_KEYS | _TRAIN_KEYS:
            raise BadArgument(f"unknown ablation key {key!r}")
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise BadArgument(f"axis {key!r} has no values")
        axes[key] = vals
    if not axes:
        raise BadArgument("no ablation axes given")
    return axes


def ablation_variants(axes, model_cfg, train_cfg):
    """Cartesian product of axis values as ``(name, ModelConfig, TrainConfig)``."""
    keys = list(axes)
    out = []
    for combo in itertools.product(*(axes[k] for k in keys)):
        m_over = {k: v for k, v in zip(keys, combo) if k in _MODEL_KEYS}
        t_over = {k: v for k, v in zip(keys, combo) if k in _TRAIN_KEYS and k not in _MODEL_KEYS}
        name = ";".join(f"{k}={v}" for k, v in zip(keys, combo))
        m = ModelConfig.from_dict({**_str_dict(model_cfg.to_dict()), **m_over})
        t = TrainConfig.from_dict({**_str_dict(train_cfg.to_dict()), **t_over})
        out.append((name, m, t))
    return out


def _str_dict(d):
    return {k: config.format_value(v) for k, v in d.items()}


def run_ablation(variants, fixture, recon_opts=None, n_s=10000, eval_seed=0, progress=None):
    """Train, reconstruct and evaluate every variant on every fixture shape.

    ``fixture`` is ``[(shape_id, mesh, cloud)]``. A variant that fails is
    recorded with its error in the ``status`` column and NaN metrics.
    """
    from .metrics import evaluate
    from .reconstruct import reconstruct

    recon_opts = dict(recon_opts or {})
    rows = []
    for name, mcfg, tcfg in variants:
        try:
            dataset = build_dataset(fixture, tcfg)
            params = train(mcfg, tcfg, dataset).params
        except Exception as exc:  # recorded, the sweep continues
            log.warning("variant %s failed in training: %s", name, exc)
            rows += [_failed_row(name, sid, n_s, eval_seed, exc) for sid, _, _ in fixture]
            continue
        for sid, mesh, cloud in fixture:
            try:
                recon = reconstruct(params, cloud, **recon_opts).mesh
                rep = evaluate(mesh, recon, n_s=n_s, seed=eval_seed)
                rows.append(dict(variant=name, shape_id=sid, chamfer_x100=rep.chamfer_x100, iou=rep.iou,
                                 f1=rep.f1, normal_error=rep.normal_error, n_s=n_s, seed=eval_seed, status="ok"))
            except Exception as exc:  # recorded, the sweep continues
                log.warning("variant %s shape %s failed: %s", name, sid, exc)
                rows.append(_failed_row(name, sid, n_s, eval_seed, exc))
            if progress:
                progress(rows[-1])
    return rows


def _failed_row(name, sid, n_s, seed, exc):
    nan = float("nan")
    status = f"error:{type(exc).__name__}"
    return dict(variant=name, shape_id=sid, chamfer_x100=nan, iou=nan, f1=nan, normal_error=nan,
                n_s=n_s, seed=seed, status=status)


def write_ablation_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([_cell(r[c]) for c in ABLATION_COLUMNS])


def read_ablation_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = []
        for r in csv.DictReader(fh):
            for c in ("chamfer_x100", "iou", "f1", "normal_error"):
                r[c] = float(r[c])
            r["n_s"] = int(r["n_s"])
            r["seed"] = int(r["seed"])
            rows.append(r)
        return rows


def _cell(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
