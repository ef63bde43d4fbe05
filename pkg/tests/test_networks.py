"""Tests for the U-net pair, parameter store, and checkpoints."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from projseg import networks as nw
from projseg.autodiff import ShapeError, Tensor, grad_check
from projseg.radon import DepthMask


def conv_params(kh, kw, cin, cout):
    return kh * kw * cin * cout + cout


def test_param_count_1650_oracle():
    # depth 1, base 4, in 1, sigmoid head with 2 classes; layer list built
    # by hand from the architecture description
    layers = [
        (3, 3, 1, 4),   # enc0.conv1
        (3, 3, 4, 4),   # enc0.conv2
        (3, 3, 4, 8),   # bottleneck.conv1
        (3, 3, 8, 8),   # bottleneck.conv2
        (2, 2, 8, 4),   # up0
        (3, 3, 8, 4),   # dec0.conv1 (skip concat doubles input channels)
        (3, 3, 4, 4),   # dec0.conv2
        (1, 1, 4, 2),   # head
    ]
    expected = sum(conv_params(*l) for l in layers)
    assert expected == 1650
    cfg = nw.UNetConfig(depth=1, base_filters=4, in_channels=1,
                        head="sigmoid", classes=2)
    assert nw.param_count(cfg) == 1650
    params = nw.init_unet_params(cfg, 0)
    assert sum(t.data.size for t in params.values()) == 1650


def test_param_count_matches_formula_for_random_configs():
    rng = np.random.default_rng(7)
    for _ in range(20):
        depth = int(rng.integers(1, 4))
        base = int(rng.integers(1, 7))
        cin = int(rng.integers(1, 4))
        if rng.integers(2):
            cfg = nw.UNetConfig(depth, base, cin, "sigmoid",
                                classes=int(rng.integers(1, 4)))
        else:
            cfg = nw.UNetConfig(depth, base, cin, "bins",
                                classes=int(rng.integers(1, 3)),
                                bins=int(rng.integers(2, 6)))
        # independent tally: walk the documented layer list
        f = [base * 2 ** i for i in range(depth + 1)]
        layers = []
        prev = cin
        for i in range(depth):
            layers += [(3, 3, prev, f[i]), (3, 3, f[i], f[i])]
            prev = f[i]
        layers += [(3, 3, prev, f[depth]), (3, 3, f[depth], f[depth])]
        for i in reversed(range(depth)):
            layers += [(2, 2, f[i + 1], f[i]),
                       (3, 3, 2 * f[i], f[i]), (3, 3, f[i], f[i])]
        layers.append((1, 1, f[0], cfg.out_channels))
        expected = sum(conv_params(*l) for l in layers)
        assert nw.param_count(cfg) == expected
        params = nw.init_unet_params(cfg, 1)
        assert sum(t.data.size for t in params.values()) == expected


def test_config_validation():
    with pytest.raises(ValueError):
        nw.UNetConfig(0, 4, 1, "sigmoid", 1)
    with pytest.raises(ValueError):
        nw.UNetConfig(1, 0, 1, "sigmoid", 1)
    with pytest.raises(ValueError):
        nw.UNetConfig(1, 4, 1, "softmax", 1)
    with pytest.raises(ValueError):
        nw.UNetConfig(1, 4, 1, "bins", 1, bins=1)
    cfg = nw.UNetConfig(2, 4, 1, "bins", 3, bins=5)
    assert cfg.out_channels == 15
    assert cfg.divisor == 4


def test_forward_preserves_spatial_extents():
    cfg = nw.UNetConfig(depth=2, base_filters=2, in_channels=1,
                        head="sigmoid", classes=1)
    params = nw.init_unet_params(cfg, 5)
    out = nw.unet_forward(cfg, params, np.zeros((1, 64, 64)))
    assert out.shape == (64, 64, 1)
    out = nw.unet_forward(cfg, params, np.zeros((2, 1, 16, 32)))
    assert out.shape == (2, 16, 32, 1)


def test_softmax_head_sums_to_one():
    cfg = nw.UNetConfig(depth=1, base_filters=3, in_channels=1,
                        head="bins", classes=2, bins=4)
    params = nw.init_unet_params(cfg, 11)
    x = np.random.default_rng(2).normal(size=(1, 8, 8))
    out = nw.unet_forward(cfg, params, x)
    assert out.shape == (8, 8, 2, 4)
    sums = out.data.sum(axis=-1)
    assert np.abs(sums - 1.0).max() <= 1e-9
    assert out.data.min() > 0.0


def test_indivisible_extents_error_names_required_divisor():
    cfg = nw.UNetConfig(depth=3, base_filters=2, in_channels=1,
                        head="sigmoid", classes=1)
    params = nw.init_unet_params(cfg, 0)
    with pytest.raises(ShapeError, match="2\\^depth = 8"):
        nw.unet_forward(cfg, params, np.zeros((1, 12, 12)))


def test_channel_mismatch_error():
    cfg = nw.UNetConfig(depth=1, base_filters=2, in_channels=2,
                        head="sigmoid", classes=1)
    params = nw.init_unet_params(cfg, 0)
    with pytest.raises(ShapeError):
        nw.unet_forward(cfg, params, np.zeros((1, 8, 8)))


def test_init_bounds_and_determinism():
    cfg = nw.UNetConfig(depth=2, base_filters=4, in_channels=1,
                        head="sigmoid", classes=1)
    a = nw.init_unet_params(cfg, 123)
    b = nw.init_unet_params(cfg, 123)
    for name, t in a.items():
        assert t.requires_grad
        assert np.array_equal(t.data, b[name].data)
        if name.endswith(".bias"):
            assert np.all(t.data == 0.0)
        else:
            if name.startswith("up"):
                fan_in = t.data.shape[0] * 4
            elif name == "head.kernel":
                fan_in = t.data.shape[1]
            else:
                fan_in = t.data.shape[1] * 9
            lim = np.sqrt(6.0 / fan_in)
            assert np.abs(t.data).max() <= lim
            # a non-degenerate draw actually uses the range
            assert np.abs(t.data).max() > 0.1 * lim


def unet_loss_for(cfg, params, x, subst_name):
    """scalar_fn over one named parameter, all others held fixed."""
    def fn(p):
        trial = dict(params)
        trial[subst_name] = p
        out = nw.unet_forward(cfg, trial, x)
        return ((out - 0.3) ** 2).sum()
    return fn


@pytest.mark.parametrize("name", [
    "enc0.conv1.kernel", "up0.kernel", "dec0.conv1.kernel", "head.bias",
])
def test_forward_gradcheck_sigmoid_head(name):
    cfg = nw.UNetConfig(depth=1, base_filters=2, in_channels=1,
                        head="sigmoid", classes=1)
    params = nw.init_unet_params(cfg, 21)
    x = np.random.default_rng(3).normal(size=(1, 8, 8))
    seed_param = Tensor(params[name].data.copy(), requires_grad=True)
    err = grad_check(unet_loss_for(cfg, params, x, name), seed_param)
    assert err <= 1e-4


def test_forward_gradcheck_bins_head():
    cfg = nw.UNetConfig(depth=1, base_filters=2, in_channels=1,
                        head="bins", classes=1, bins=3)
    params = nw.init_unet_params(cfg, 22)
    x = np.random.default_rng(4).normal(size=(1, 8, 8))
    err = grad_check(unet_loss_for(cfg, params, x, "head.kernel"),
                     params["head.kernel"])
    assert err <= 1e-4


# ---- depth-mask prediction and supervision ---------------------------------


def test_depth_mask_output_contract():
    cfg = nw.masker_config(classes=1, depth=1, base_filters=2)
    params = nw.init_unet_params(cfg, 8)
    dm = nw.predict_depth_mask(cfg, params, np.random.default_rng(5).normal(size=(8, 8)))
    assert isinstance(dm, DepthMask)
    q = dm.q.data
    assert q.shape == (8, 8)
    assert q.min() > 0.0 and q.max() < 1.0


def test_depth_mask_constant_input_is_finite():
    cfg = nw.masker_config(classes=1, depth=1, base_filters=2)
    params = nw.init_unet_params(cfg, 9)
    dm = nw.predict_depth_mask(cfg, params, np.full((8, 8), 3.25))
    assert np.all(np.isfinite(dm.q.data))


def test_depth_mask_zscore_removes_affine_scaling():
    cfg = nw.masker_config(classes=1, depth=1, base_filters=2)
    params = nw.init_unet_params(cfg, 10)
    x = np.random.default_rng(6).normal(size=(8, 8))
    a = nw.predict_depth_mask(cfg, params, x)
    b = nw.predict_depth_mask(cfg, params, 7.0 * x + 11.0)
    assert_allclose(a.q.data, b.q.data, atol=1e-12)


def test_depth_mask_multiclass_returns_tuple():
    cfg = nw.masker_config(classes=2, depth=1, base_filters=2)
    params = nw.init_unet_params(cfg, 12)
    out = nw.predict_depth_mask(cfg, params, np.zeros((8, 8)))
    assert isinstance(out, tuple) and len(out) == 2
    assert all(isinstance(m, DepthMask) for m in out)


def test_depth_mask_rejects_bins_head():
    cfg = nw.UNetConfig(1, 2, 1, "bins", 1, bins=2)
    params = nw.init_unet_params(cfg, 0)
    with pytest.raises(ValueError):
        nw.predict_depth_mask(cfg, params, np.zeros((8, 8)))


def test_depth_target_empty_mask():
    out = nw.depth_mask_target(np.zeros((6, 6, 4)), 33.0)
    assert out.shape == (6, 4)
    assert np.all(out == 0.0)


def test_depth_target_single_voxel_axis_aligned():
    vol = np.zeros((8, 8, 3))
    vol[5, 2, 1] = 1.0
    out = nw.depth_mask_target(vol, 0.0)
    # at 0 deg the orthogonal integral sums the transverse axis: only the
    # voxel's own (depth, axial) line sees it
    expected = np.zeros((8, 3))
    expected[5, 1] = 1.0
    assert np.array_equal(out, expected)


def test_depth_target_full_mask_inscribed_rows():
    n = 16
    vol = np.ones((n, n, 2))
    out = nw.depth_mask_target(vol, 45.0)
    c = (n - 1) / 2.0
    for t in range(n):
        if abs(t - c) <= n / 2.0 - 2.0:
            assert np.all(out[t] == 1.0), f"row {t} should be covered"


def test_depth_target_rejects_nonbinary():
    with pytest.raises(ValueError):
        nw.depth_mask_target(np.full((4, 4, 2), 0.5), 0.0)


def test_depth_target_multiclass():
    vol = np.zeros((6, 6, 2, 2))
    vol[1, 2, 0, 0] = 1.0
    vol[4, 3, 1, 1] = 1.0
    out = nw.depth_mask_target(vol, 0.0)
    assert out.shape == (6, 2, 2)
    assert out[1, 0, 0] == 1.0 and out[4, 1, 1] == 1.0
    assert out.sum() == 2.0


# ---- parameter store and checkpoints ---------------------------------------


def test_store_rejects_duplicates_and_nontensors():
    store = nw.ParameterStore()
    store.add("a.b", Tensor(np.zeros(3)))
    with pytest.raises(ValueError):
        store.add("a.b", Tensor(np.zeros(3)))
    with pytest.raises(TypeError):
        store.add("c", np.zeros(3))
    with pytest.raises(ValueError):
        store.add("", Tensor(np.zeros(1)))


def test_store_groups_and_count():
    store = nw.ParameterStore()
    cfg = nw.UNetConfig(1, 2, 1, "sigmoid", 1)
    store.add_group("seg", nw.init_unet_params(cfg, 0))
    store.add("lift.scale", Tensor(np.ones(1), requires_grad=True))
    assert "seg.enc0.conv1.kernel" in store
    sub = store.group("seg")
    assert set(sub) == set(nw.init_unet_params(cfg, 0))
    assert store.total_count == nw.param_count(cfg) + 1
    assert store.names()[0] == "seg.enc0.conv1.kernel"


def test_store_zero_grads():
    store = nw.ParameterStore()
    t = Tensor(np.ones(2), requires_grad=True)
    store.add("x", t)
    (t * t).sum().backward()
    assert t.grad is not None
    store.zero_grads()
    assert t.grad is None


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    store = nw.ParameterStore()
    cfg = nw.UNetConfig(1, 3, 1, "bins", 1, bins=2)
    store.add_group("seg", nw.init_unet_params(cfg, 99))
    # awkward values: negative zero, denormals, huge magnitudes
    store.add("edge", Tensor(np.array([-0.0, 5e-324, -1.7e308, np.pi]),
                             requires_grad=True))
    path = tmp_path / "weights.ckpt"
    nw.save_checkpoint(store, path)
    back = nw.load_checkpoint(path)
    assert back.names() == store.names()
    for name, t in store.items():
        lt = back[name]
        assert lt.requires_grad
        assert lt.data.shape == t.data.shape
        assert lt.data.tobytes() == t.data.tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPTxxxxxxx")
    with pytest.raises(ValueError):
        nw.load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    store = nw.ParameterStore()
    store.add("w", Tensor(np.arange(16.0), requires_grad=True))
    path = tmp_path / "t.ckpt"
    nw.save_checkpoint(store, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(ValueError):
        nw.load_checkpoint(path)
    path.write_bytes(blob + b"\x00" * 4)
    with pytest.raises(ValueError):
        nw.load_checkpoint(path)
