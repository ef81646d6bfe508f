import numpy as np
import pytest

from spformer import ops
from spformer.geometry import build_grid
from spformer.gradcheck import grad_check
from spformer.model import (
    ConfigError,
    ModelConfig,
    SPFormer,
    embed,
    flops_estimate,
    forward_classify,
    forward_plain,
    init_params,
    mhsa_block,
    param_count,
    param_shapes,
    patchify_stem,
    superpixel_init,
    variant_config,
)
from spformer.tensor import Tensor

import oracles


def f64(t):
    return np.asarray(t.data, dtype=np.float64)


def test_patchify_matches_unfold():
    rng = np.random.default_rng(0)
    img = rng.random((1, 16, 24, 3))
    w = rng.standard_normal((48, 8))
    b = rng.standard_normal(8)
    out = f64(patchify_stem(Tensor(img), Tensor(w), Tensor(b), 4))
    want = oracles.unfold_patches(img[0], 4) @ w + b
    np.testing.assert_allclose(out[0].reshape(-1, 8), want, atol=1e-5)


def test_224_input_gives_56_grid():
    cfg = variant_config("S", channels=12, mhsa_heads=2, depth=2, sca_positions=(0,))
    params = init_params(cfg)
    I0, S0, grid = embed(Tensor(np.zeros((1, 224, 224, 3))), cfg, params)
    assert I0.shape == (1, 56, 56, 12)
    assert (grid.sh, grid.sw) == (14, 14) and S0.shape == (1, 14, 14, 12)


@pytest.mark.parametrize("h,w", [(16, 16), (14, 10)])
def test_superpixel_init_is_cell_mean_then_projection(h, w):
    rng = np.random.default_rng(1)
    grid = build_grid(h, w, 4)
    x = rng.standard_normal((2, h, w, 6))
    wt, b = rng.standard_normal((6, 5)), rng.standard_normal(5)
    out = f64(superpixel_init(Tensor(x), grid, Tensor(wt), Tensor(b)))
    for n in range(2):
        np.testing.assert_allclose(out[n], oracles.cell_means(x[n], 4) @ wt + b, atol=1e-5)


def test_mhsa_matches_dense():
    rng = np.random.default_rng(2)
    c, hid = 8, 32
    shapes = {
        "norm1.weight": (c,), "norm1.bias": (c,), "norm2.weight": (c,), "norm2.bias": (c,),
        "gamma1": (c,), "gamma2": (c,), "mlp.fc1.weight": (c, hid), "mlp.fc1.bias": (hid,),
        "mlp.fc2.weight": (hid, c), "mlp.fc2.bias": (c,),
    }
    for n in ("q", "k", "v", "proj"):
        shapes[f"attn.{n}.weight"] = (c, c)
        shapes[f"attn.{n}.bias"] = (c,)
    raw = {k: rng.standard_normal(s) * 0.5 for k, s in shapes.items()}
    x = rng.standard_normal((2, 7, c))
    out = f64(mhsa_block(Tensor(x), {"b." + k: Tensor(v) for k, v in raw.items()}, "b.", 2))
    p64 = {k: v.astype(np.float32).astype(np.float64) for k, v in raw.items()}
    for n in range(2):
        want = oracles.mhsa(x[n].astype(np.float32).astype(np.float64), p64, 2)
        np.testing.assert_allclose(out[n], want, atol=1e-4)


def test_toy_forward_shapes_and_trace():
    model = SPFormer(variant_config("toy"))
    imgs = np.random.default_rng(3).random((2, 64, 64, 3))
    from spformer.model import ForwardTrace
    trace = ForwardTrace()
    logits = model.classify(imgs, trace=trace)
    assert logits.shape == (2, 4)
    assert trace.grid.n_superpixels == 16
    assert len(trace.associations) == 2 and len(trace.iterations) == 4
    for A in trace.iterations:
        A.check()
    seg = model.segment(imgs)
    assert seg.shape == (2, 16, 16, 4)


def test_transparency_at_zero_layerscale():
    cfg = variant_config("toy", layerscale_init=0.0)
    params = init_params(cfg, seed=5)
    imgs = Tensor(np.random.default_rng(4).random((3, 64, 64, 3)))
    a = forward_classify(imgs, cfg, params)
    b = forward_plain(imgs, cfg, params)
    assert a.data.dtype == np.float32
    np.testing.assert_array_equal(a.data, b.data)


def test_translation_invariance_without_position_embedding():
    cfg = variant_config("toy", pos_embed="none", layerscale_init=0.5)
    params = init_params(cfg, seed=6)
    rng = np.random.default_rng(7)
    img = np.full((1, 64, 256, 3), 0.3)
    img[:, 20:44, 100:140] = rng.random((1, 24, 40, 3))
    shift = cfg.superpixel_ratio * cfg.stem_stride
    moved = np.roll(img, shift, axis=2)
    a = f64(forward_classify(Tensor(img), cfg, params))
    b = f64(forward_classify(Tensor(moved), cfg, params))
    assert np.abs(a - b).max() < 1e-4
    # a non-grid-aligned shift is not expected to be invariant
    c = f64(forward_classify(Tensor(np.roll(img, 3, axis=2)), cfg, params))
    assert np.abs(a - c).max() > 1e-4


def test_param_count_matches_instantiation():
    for name in ("toy", "T", "S/32", "B+conv"):
        cfg = variant_config(name)
        shapes = param_shapes(cfg)
        assert param_count(cfg) == sum(int(np.prod(s)) for s in shapes.values())
    model = SPFormer(variant_config("toy"))
    assert model.num_parameters() == param_count(model.config)
    assert [n for n, _ in model.named_parameters()] == list(param_shapes(model.config))


@pytest.mark.parametrize("name,lo,hi", [("S", 20.9e6, 23.1e6), ("B", 82.65e6, 91.35e6)])
def test_param_counts_in_range(name, lo, hi):
    assert lo <= param_count(variant_config(name)) <= hi


def test_flops_scale_with_superpixel_count():
    s, s32, s56 = (flops_estimate(variant_config(n)) for n in ("S", "S/32", "S/56"))
    assert 0.85 * 5.2e9 <= s <= 1.15 * 5.2e9
    assert s > s32 > s56


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(channels=30, mhsa_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(sca_positions=(2, 1))
    with pytest.raises(ConfigError):
        variant_config("Q")
    with pytest.raises(ConfigError):
        SPFormer(variant_config("toy"), params={})


def test_learnable_pos_embed_rejects_other_sizes():
    cfg = variant_config("toy", pos_embed="learnable")
    model = SPFormer(cfg)
    assert model.classify(np.zeros((1, 64, 64, 3))).shape == (1, 4)
    with pytest.raises(ConfigError):
        model.classify(np.zeros((1, 32, 32, 3)))


def test_conv_stem_forward():
    cfg = variant_config("toy", stem="conv")
    model = SPFormer(cfg)
    assert model.classify(np.zeros((1, 64, 64, 3))).shape == (1, 4)


def test_stochastic_depth_only_with_rng():
    cfg = variant_config("toy", stochastic_depth_rate=0.5)
    model = SPFormer(cfg)
    imgs = np.random.default_rng(8).random((4, 64, 64, 3))
    a = f64(model.classify(imgs))
    np.testing.assert_array_equal(a, f64(model.classify(imgs)))
    b = f64(model.classify(imgs, rng=np.random.default_rng(0)))
    assert not np.array_equal(a, b)


def test_full_model_gradients_toy():
    cfg = variant_config("toy", image_size=32, layerscale_init=0.3, stochastic_depth_rate=0.0)
    params = init_params(cfg, seed=9)
    # larger linear weights than the 0.02 init so every path carries signal
    rng = np.random.default_rng(10)
    for name, p in params.items():
        if p.ndim == 2:
            p.data = (rng.standard_normal(p.shape) / np.sqrt(p.shape[0])).astype(np.float32)
    imgs = Tensor(rng.random((2, 32, 32, 3)))
    labels = np.array([1, 3])

    def f():
        return ops.cross_entropy(forward_classify(imgs, cfg, params), labels, 0.1)

    err = grad_check(f, list(params.values()), eps=1e-3, max_entries=6, seed=0)
    assert err < 1e-2
