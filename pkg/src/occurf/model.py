"""Dual-branch occupancy network.

A *global* branch runs a stack of point convolutions over a sparse subset of
the cloud and interpolates the resulting per-point features at the query with
multi-head attention weights. A *local* branch embeds the normalized k-NN
patch around the query with a PointNet-style MLP and pools it with a learned
softmax weighting. The two feature vectors are summed (or concatenated) and
mapped to a single occupancy logit.

The point convolution is a simplified stand-in for FKAConv: per neighbour, a
small MLP on the relative offset produces channel-wise mixing weights that
modulate the neighbour's features; the mean over neighbours goes through a
linear map and is added back residually.
"""

import struct
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from . import config
from .autodiff import Tensor
from .errors import BadArgument, EmptyInput, TooSparse
from .spatial import KnnIndex

GROUPS = ("conv", "ga", "gb", "gw", "la", "lb", "lv", "head")
GLOBAL_GROUPS = ("conv", "ga", "gb", "gw")
LOCAL_GROUPS = ("la", "lb", "lv")


@dataclass(frozen=True)
class ModelConfig:
    sparse_size: int = 1000
    conv_layers: int = 4
    conv_k: int = 16
    interp_k: int = 16
    attention_heads: int = 16
    global_latent: int = 32
    local_latent: int = 64
    patch_k: int = 50
    kernel_hidden: int = 32
    offset_scale: float = 0.05
    local_agg: str = "attention"  # attention | max | sum
    merge: str = "sum"  # sum | cat
    patch_center: str = "query"  # query | centroid
    branches: str = "both"  # both | global | local
    conv_kernel: str = "offset_mlp"
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        for name in ("sparse_size", "conv_layers", "conv_k", "interp_k", "attention_heads",
                     "global_latent", "local_latent", "patch_k", "kernel_hidden"):
            if getattr(self, name) < 1:
                raise BadArgument(f"{name} must be >= 1")
        if self.offset_scale <= 0:
            raise BadArgument("offset_scale must be positive")
        choices = {
            "local_agg": ("attention", "max", "sum"),
            "merge": ("sum", "cat"),
            "patch_center": ("query", "centroid"),
            "branches": ("both", "global", "local"),
            "conv_kernel": ("offset_mlp",),
            "activation": ("relu",),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise BadArgument(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    @classmethod
    def full_scale(cls, **overrides):
        """Large-scale hyperparameters: dense sparse subset, deep encoder, wide latents."""
        base = dict(sparse_size=10000, conv_layers=10, attention_heads=64, global_latent=128,
                    local_latent=256, patch_k=50)
        base.update(overrides)
        return cls(**base)

    @property
    def head_input(self):
        return 2 * self.global_latent if self.merge == "cat" else self.global_latent

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return config.build(cls, d)

    def with_(self, **kw):
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class ModelParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, cfg, tensors):
        self.cfg = cfg
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def parameters(self):
        return list(self.tensors.values())

    def named(self):
        return list(self.tensors.items())

    def group(self, name):
        return {k: v for k, v in self.tensors.items() if k.split(".")[0] == name}

    def zero_group(self, *names):
        for name in names:
            for t in self.group(name).values():
                t.data[...] = 0

    def copy(self):
        return ModelParams(self.cfg, {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                                      for k, v in self.tensors.items()})

    def num_parameters(self):
        return int(sum(t.data.size for t in self.tensors.values()))


def _layer_shapes(cfg):
    C, L, H, Hk = cfg.global_latent, cfg.local_latent, cfg.attention_heads, cfg.kernel_hidden
    shapes = []
    for i in range(cfg.conv_layers):
        shapes += [(f"conv.{i}.k0", 3, Hk), (f"conv.{i}.k1", Hk, C), (f"conv.{i}.lin", C, C)]
    shapes += [("ga.0", 3 + C, C), ("ga.1", C, C)]
    shapes += [("gw.0", 3 + C, H)]
    shapes += [("gb.0", C, C), ("gb.1", C, C)]
    shapes += [("la.0", 3, L), ("la.1", L, L), ("la.2", L, L)]
    shapes += [("lv.0", L, 1)]
    shapes += [("lb.0", L, L), ("lb.1", L, C)]
    shapes += [("head.0", cfg.head_input, C), ("head.1", C, C), ("head.2", C, 1)]
    return shapes


def init_params(cfg, seed=None):
    """Uniform fan-in weights (bound ``1 / sqrt(fan_in)``) and zero biases."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    tensors = {}
    for name, fan_in, fan_out in _layer_shapes(cfg):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        tensors[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
        tensors[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b")
    return ModelParams(cfg, tensors)


def _dense(params, name, x):
    return ad.linear(x, params[f"{name}.w"], params[f"{name}.b"])


def _mlp(params, prefix, n_layers, x):
    for i in range(n_layers):
        x = _dense(params, f"{prefix}.{i}", x)
        if i < n_layers - 1:
            x = ad.relu(x)
    return x


# ---------------------------------------------------------------------------
# global branch
# ---------------------------------------------------------------------------


def global_encode(params, sparse_points, neighbors=None):
    """Per-point features ``(N, global_latent)`` for the sparse cloud.

    Only relative offsets enter the kernels, so the output is invariant to
    translating the cloud and equivariant to permuting it.
    """
    cfg = params.cfg
    pts = np.asarray(sparse_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < cfg.conv_k:
        raise TooSparse(f"need at least conv_k={cfg.conv_k} points, got {len(pts)}")
    if neighbors is None:
        neighbors, _ = KnnIndex(pts).query(pts, cfg.conv_k)
    rel = Tensor((pts[neighbors] - pts[:, None, :]) / cfg.offset_scale)
    z = Tensor(np.ones((len(pts), cfg.global_latent)))
    for i in range(cfg.conv_layers):
        kern = _dense(params, f"conv.{i}.k1", ad.relu(_dense(params, f"conv.{i}.k0", rel)))
        mixed = ad.mul(kern, ad.gather(z, neighbors))
        agg = ad.reduce_mean(mixed, axis=1)
        z = ad.add(z, ad.relu(_dense(params, f"conv.{i}.lin", agg)))
    return z


def interpolation_inputs(params, feats, points, x, index=None):
    """``(x - p_j) / offset_scale || z_j`` over the ``interp_k`` nearest points."""
    cfg = params.cfg
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    index = index or KnnIndex(points)
    nbr, _ = index.query(x, cfg.interp_k)
    rel = Tensor((x[:, None, :] - points[nbr]) / cfg.offset_scale)
    return ad.concat([rel, ad.gather(feats, nbr)], axis=-1)


def attention_weights(params, inputs):
    """Mean over heads of per-head softmax across neighbours: ``(Q, k, 1)``."""
    logits = _dense(params, "gw.0", inputs)  # (Q, k, heads)
    return ad.reduce_mean(ad.softmax(logits, axis=1), axis=2, keepdims=True)


def global_interpolate(params, feats, points, x, index=None, return_weights=False):
    """Global feature at each query ``x`` from per-point features ``feats``."""
    inp = interpolation_inputs(params, feats, points, x, index)
    w = attention_weights(params, inp)
    h = _mlp(params, "ga", 2, inp)
    pooled = ad.reduce_sum(ad.mul(w, h), axis=1)
    out = _mlp(params, "gb", 2, pooled)
    return (out, w) if return_weights else out


# ---------------------------------------------------------------------------
# local branch
# ---------------------------------------------------------------------------


def local_forward(params, patch_points, return_weights=False):
    """Local feature from normalized patches ``(Q, K, 3)`` (or a single ``(K, 3)``)."""
    cfg = params.cfg
    pts = np.asarray(getattr(patch_points, "normalized_points", patch_points), dtype=np.float64)
    single = pts.ndim == 2
    if single:
        pts = pts[None]
    if pts.shape[1] == 0:
        raise EmptyInput("empty patch")
    emb = _mlp(params, "la", 3, Tensor(pts))  # (Q, K, L)
    w = None
    if cfg.local_agg == "attention":
        w = ad.softmax(_dense(params, "lv.0", emb), axis=1)  # (Q, K, 1)
        pooled = ad.reduce_sum(ad.mul(w, emb), axis=1)
    elif cfg.local_agg == "max":
        pooled = ad.reduce_max(emb, axis=1)
    else:
        pooled = ad.reduce_mean(emb, axis=1)
    out = _mlp(params, "lb", 2, pooled)
    return (out, w) if return_weights else out


# ---------------------------------------------------------------------------
# full network
# ---------------------------------------------------------------------------


def merge_features(params, g, l):
    if params.cfg.merge == "cat":
        return ad.concat([g, l], axis=-1)
    return ad.add(g, l)


def head(params, merged):
    logit = _mlp(params, "head", 3, merged)
    return logit


def occupancy_forward(params, x, sparse_points, feats, patches, index=None):
    """``(logit Tensor (Q,), probability ndarray (Q,))`` at queries ``x``.

    ``feats`` are the per-point global features aligned with ``sparse_points``;
    ``patches`` are the normalized local patches ``(Q, K, 3)``.
    """
    cfg = params.cfg
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    q = len(x)
    zeros = Tensor(np.zeros((q, cfg.global_latent)))
    g = global_interpolate(params, feats, sparse_points, x, index) if cfg.branches != "local" else zeros
    l = local_forward(params, patches) if cfg.branches != "global" else zeros
    logit = head(params, merge_features(params, g, l))
    flat = _reshape_logits(logit)
    return flat, ad.sigmoid(flat.data)


def _reshape_logits(logit):
    # (Q, 1) -> (Q,) without a dedicated reshape op
    return ad.reduce_sum(logit, axis=-1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"OCRF"
FORMAT_VERSION = 1


def save_checkpoint(path, params):
    cfg_bytes = config.format_lines(params.cfg.to_dict()).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(params.tensors)))
        for name, t in params.tensors.items():
            nb = name.encode("utf-8")
            arr = np.ascontiguousarray(t.data, dtype="<f4")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise BadArgument(f"{path}: not a checkpoint (bad magic)")
    try:
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != FORMAT_VERSION:
            raise BadArgument(f"{path}: unsupported checkpoint version {version}")
        (n_cfg,) = struct.unpack_from("<I", blob, 8)
        off = 12
        cfg = ModelConfig.from_dict(config.parse_lines(blob[off : off + n_cfg].decode("utf-8")))
        off += n_cfg
        (n_t,) = struct.unpack_from("<I", blob, off)
        off += 4
        tensors = {}
        for _ in range(n_t):
            (n_name,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + n_name].decode("utf-8")
            off += n_name
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
            tensors[name] = Tensor(data.astype(np.float32), requires_grad=True, name=name)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise BadArgument(f"{path}: corrupt checkpoint ({exc})") from exc
    expected = {f"{n}.{s}" for n, _, _ in _layer_shapes(cfg) for s in ("w", "b")}
    if set(tensors) != expected:
        raise BadArgument(f"{path}: parameter names do not match the stored config")
    return ModelParams(cfg, tensors)
