import numpy as np
import pytest

from occurf import autodiff as ad
from occurf.autodiff import Tensor
from occurf.errors import BadArgument, EmptyInput, TooSparse
from occurf.model import (
    GLOBAL_GROUPS,
    GROUPS,
    LOCAL_GROUPS,
    ModelConfig,
    attention_weights,
    global_encode,
    global_interpolate,
    init_params,
    interpolation_inputs,
    load_checkpoint,
    local_forward,
    occupancy_forward,
    save_checkpoint,
)
from modelutil import as_float64, forward, randomize, scene, tiny_config


def test_config_defaults_and_full_scale_values():
    d = ModelConfig()
    assert (d.sparse_size, d.conv_layers, d.attention_heads, d.global_latent, d.local_latent) == (1000, 4, 16, 32, 64)
    p = ModelConfig.full_scale()
    assert (p.sparse_size, p.conv_layers, p.attention_heads, p.global_latent, p.local_latent, p.patch_k) == (
        10000, 10, 64, 128, 256, 50)
    assert ModelConfig(merge="cat").head_input == 2 * d.global_latent
    with pytest.raises(BadArgument):
        ModelConfig(local_agg="median")
    with pytest.raises(BadArgument):
        ModelConfig(conv_k=0)


def test_encode_permutation_equivariant():
    cfg = tiny_config()
    p = randomize(init_params(cfg), 1)
    pts = np.random.default_rng(0).random((40, 3))
    perm = np.random.default_rng(1).permutation(40)
    z = global_encode(p, pts).data
    zp = global_encode(p, pts[perm]).data
    np.testing.assert_allclose(zp, z[perm], rtol=1e-5, atol=1e-6)


def test_encode_translation_invariant():
    cfg = tiny_config()
    p = randomize(init_params(cfg), 2)
    pts = np.random.default_rng(0).random((40, 3))
    np.testing.assert_allclose(global_encode(p, pts + [0.3, -0.2, 0.7]).data, global_encode(p, pts).data,
                               rtol=1e-5, atol=1e-5)


def test_encode_minimal_and_too_sparse():
    cfg = tiny_config()
    p = init_params(cfg)
    pts = np.random.default_rng(0).random((cfg.conv_k, 3))
    assert np.isfinite(global_encode(p, pts).data).all()
    with pytest.raises(TooSparse):
        global_encode(p, pts[:-1])


def test_single_head_identical_inputs_give_uniform_weights():
    cfg = tiny_config(attention_heads=1)
    p = randomize(init_params(cfg), 3)
    row = np.random.default_rng(0).normal(size=3 + cfg.global_latent)
    inp = Tensor(np.tile(row, (5, cfg.interp_k, 1)))
    w = attention_weights(p, inp).data
    np.testing.assert_allclose(w, 1.0 / cfg.interp_k, rtol=1e-6)


def test_interpolation_weights_sum_to_one():
    cfg = tiny_config()
    p = randomize(init_params(cfg), 4)
    sparse, x, _, _ = scene(cfg)
    feats = global_encode(p, sparse)
    _, w = global_interpolate(p, feats, sparse, x, return_weights=True)
    np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-6)


def test_duplicated_neighbours_leave_interpolation_unchanged():
    cfg = tiny_config()
    p = randomize(init_params(cfg), 5)
    sparse, x, _, _ = scene(cfg)
    feats = global_encode(p, sparse)
    ref = global_interpolate(p, feats, sparse, x).data
    dup_pts = np.repeat(sparse, 2, axis=0)
    dup_feats = Tensor(np.repeat(feats.data, 2, axis=0))
    p2 = type(p)(cfg.with_(interp_k=2 * cfg.interp_k), p.tensors)
    out = global_interpolate(p2, dup_feats, dup_pts, x).data
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("agg", ["attention", "max", "sum"])
def test_single_point_patch(agg):
    cfg = tiny_config(local_agg=agg)
    p = randomize(init_params(cfg), 6)
    out = local_forward(p, np.zeros((1, 1, 3))).data
    with ad.no_grad():
        emb = p["la.0.w"]
        e = np.zeros(3)
        for i in range(3):
            e = e @ p[f"la.{i}.w"].data + p[f"la.{i}.b"].data
            if i < 2:
                e = np.maximum(e, 0)
        h = np.maximum(e @ p["lb.0.w"].data + p["lb.0.b"].data, 0)
        want = h @ p["lb.1.w"].data + p["lb.1.b"].data
    np.testing.assert_allclose(out[0], want, rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("agg", ["attention", "max", "sum"])
def test_patch_permutation_invariance(agg):
    cfg = tiny_config(local_agg=agg)
    p = randomize(init_params(cfg), 7)
    pts = np.random.default_rng(0).normal(size=(4, 30, 3))
    perm = np.random.default_rng(1).permutation(30)
    np.testing.assert_allclose(local_forward(p, pts[:, perm]).data, local_forward(p, pts).data,
                               rtol=1e-6, atol=1e-6)


def test_local_attention_matches_two_pass_oracle():
    cfg = ModelConfig(local_latent=64, global_latent=32)
    p = randomize(init_params(cfg), 8, scale=0.1)
    pts = np.random.default_rng(0).normal(size=(50, 3))
    out, w = local_forward(p, pts[None], return_weights=True)
    P = {k: v.data.astype(np.float64) for k, v in p.named()}
    e = pts
    for i in range(3):
        e = e @ P[f"la.{i}.w"] + P[f"la.{i}.b"]
        if i < 2:
            e = np.maximum(e, 0)
    s = (e @ P["lv.0.w"] + P["lv.0.b"])[:, 0]
    v = np.exp(s - s.max())
    v /= v.sum()
    pooled = (v[:, None] * e).sum(axis=0)
    want = np.maximum(pooled @ P["lb.0.w"] + P["lb.0.b"], 0) @ P["lb.1.w"] + P["lb.1.b"]
    np.testing.assert_allclose(out.data[0], want, rtol=1e-5, atol=1e-6)
    assert abs(float(w.data.sum()) - 1.0) < 1e-6


def test_empty_patch_rejected():
    p = init_params(tiny_config())
    with pytest.raises(EmptyInput):
        local_forward(p, np.zeros((1, 0, 3)))


def test_zeroed_global_branch_is_local_only():
    cfg = tiny_config()
    p = randomize(init_params(cfg), 9)
    sparse, x, patches, _ = scene(cfg)
    p.zero_group(*GLOBAL_GROUPS)
    full, _ = forward(p, sparse, x, patches)
    local_only = type(p)(cfg.with_(branches="local"), p.tensors)
    lo, _ = occupancy_forward(local_only, x, sparse, None, patches)
    np.testing.assert_array_equal(full.data, lo.data)


def test_zeroed_local_branch_is_global_only():
    cfg = tiny_config()
    p = randomize(init_params(cfg), 10)
    sparse, x, patches, _ = scene(cfg)
    p.zero_group(*LOCAL_GROUPS)
    full, _ = forward(p, sparse, x, patches)
    g_only = type(p)(cfg.with_(branches="global"), p.tensors)
    go, _ = forward(g_only, sparse, x, None)
    np.testing.assert_array_equal(full.data, go.data)


def test_merge_cat_wiring_against_sum():
    cat_cfg = tiny_config(merge="cat")
    pc = randomize(init_params(cat_cfg), 11)
    pc.zero_group(*GLOBAL_GROUPS)
    C = cat_cfg.global_latent
    pc["head.0.w"].data[:C] = 0
    sum_cfg = cat_cfg.with_(merge="sum")
    ps = type(pc)(sum_cfg, {**pc.tensors, "head.0.w": Tensor(pc["head.0.w"].data[C:].copy(), requires_grad=True)})
    sparse, x, patches, _ = scene(cat_cfg)
    a, _ = forward(pc, sparse, x, patches)
    b, _ = forward(ps, sparse, x, patches)
    np.testing.assert_allclose(a.data, b.data, rtol=1e-6, atol=1e-7)


def test_probabilities_in_open_interval_fuzz():
    for seed in range(5):
        cfg = tiny_config(local_agg=["attention", "max", "sum"][seed % 3], merge=["sum", "cat"][seed % 2])
        p = randomize(init_params(cfg, seed=seed), seed)
        sparse, x, patches, _ = scene(cfg, n_query=200, seed=seed)
        logit, prob = forward(p, sparse, x, patches)
        assert np.isfinite(logit.data).all()
        assert ((prob > 0) & (prob < 1)).all()


@pytest.mark.parametrize("agg", ["attention", "max"])
def test_every_group_receives_gradient(agg):
    cfg = tiny_config(local_agg=agg)
    p = randomize(init_params(cfg), 12)
    sparse, x, patches, labels = scene(cfg)
    logit, _ = forward(p, sparse, x, patches)
    ad.backward(ad.bce_with_logits(logit, labels))
    # max pooling has no weighting layer, so "lv" is unused on that path
    used = GROUPS if agg == "attention" else tuple(g for g in GROUPS if g != "lv")
    for g in used:
        assert any(t.grad is not None and np.abs(t.grad).max() > 0 for t in p.group(g).values()), g


def network_fd_error(seed=0, n_params=50, h=1e-5):
    """Max relative error of d(loss)/d(theta) over randomly chosen scalar parameters.

    The step is small because the loss is piecewise smooth: with ``h=1e-3``
    a perturbation regularly moves some ReLU input across zero.
    """
    cfg = tiny_config()
    p = randomize(init_params(cfg, seed=seed), seed)
    sparse, x, patches, labels = scene(cfg, seed=seed)
    logit, _ = forward(p, sparse, x, patches)
    ad.backward(ad.bce_with_logits(logit, labels))
    p64 = as_float64(p)
    rng = np.random.default_rng(seed)
    names = [n for n, _ in p.named()]
    worst = 0.0
    for _ in range(n_params):
        name = names[rng.integers(len(names))]
        t = p64[name]
        i = tuple(int(rng.integers(s)) for s in t.shape)

        def loss_at(v):
            old = t.data[i]
            t.data[i] = v
            with ad.precision(np.float64), ad.no_grad():
                lg, _ = forward(p64, sparse, x, patches)
                out = float(ad.bce_with_logits(lg, labels).data)
            t.data[i] = old
            return out

        base = float(t.data[i])
        num = (loss_at(base + h) - loss_at(base - h)) / (2 * h)
        ana = float(p[name].grad[i])
        worst = max(worst, abs(ana - num) / max(abs(num), 1e-3))
    return worst


@pytest.mark.parametrize("seed", range(3))
def test_full_network_gradient_matches_finite_differences(seed):
    assert network_fd_error(seed=seed) < 1e-3


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = tiny_config(merge="cat", local_agg="max", patch_center="centroid")
    p = randomize(init_params(cfg), 13)
    save_checkpoint(tmp_path / "m.ckpt", p)
    q = load_checkpoint(tmp_path / "m.ckpt")
    assert q.cfg == cfg
    assert list(q.tensors) == list(p.tensors)
    for k in p.tensors:
        assert q[k].data.dtype == np.float32
        assert np.array_equal(q[k].data, p[k].data)
    save_checkpoint(tmp_path / "n.ckpt", q)
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"XXXX" + b"\0" * 32)
    with pytest.raises(BadArgument):
        load_checkpoint(path)
    path.write_bytes(b"OCRF\x01\x00\x00\x00\xff\xff")
    with pytest.raises(BadArgument):
        load_checkpoint(path)
