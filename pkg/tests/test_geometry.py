"""Tests for angle fans, orientations, and in-plane rotation."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from projseg import geometry as geo
from projseg.autodiff import Tensor


def gaussian_blob(n, d3=1, sigma=None, center=None):
    """Smooth test volume supported well inside the inscribed cylinder."""
    if sigma is None:
        sigma = n / 8.0
    if center is None:
        center = ((n - 1) / 2.0, (n - 1) / 2.0)
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    r2 = (ii - center[0]) ** 2 + (jj - center[1]) ** 2
    sl = np.exp(-r2 / (2 * sigma**2))
    return np.repeat(sl[:, :, None], d3, axis=2)


# ---- angle_set ------------------------------------------------------------


def test_angle_set_320_32():
    a = geo.angle_set(320, 32)
    assert len(a) == 31
    assert a.angles[0] == -90.0
    assert_allclose(a.angles[1] - a.angles[0], 180.0 * 32 / (320 * np.pi),
                    rtol=1e-12)
    assert_allclose(a.angles[1] - a.angles[0], 5.7296, atol=1e-4)


def test_angle_set_320_2_count():
    assert len(geo.angle_set(320, 2)) == 502


def test_angle_set_4_2_values():
    a = geo.angle_set(4, 2)
    expect = [-90.0, -61.352, -32.704, -4.056, 24.592, 53.239]
    assert_allclose(a.angles, expect, atol=1e-3)


def test_angle_set_rejects_bad_parameters():
    with pytest.raises(ValueError):
        geo.angle_set(1, 2)
    with pytest.raises(ValueError):
        geo.angle_set(4, 0.5)
    with pytest.raises(ValueError):
        geo.angle_set(2, 7)  # floor(2*pi/7) = 0 angles


def test_angle_set_tiles_half_circle():
    rng = np.random.default_rng(10)
    for _ in range(25):
        d1 = int(rng.integers(2, 400))
        M = float(rng.uniform(1, 40))
        try:
            a = geo.angle_set(d1, M)
        except ValueError:
            continue
        spacing = 180.0 * M / (d1 * np.pi)
        total = spacing * len(a)
        assert 180.0 - spacing <= total <= 180.0 + 1e-9
        assert all(-90.0 <= ang < 90.0 for ang in a.angles)


# ---- orientations ---------------------------------------------------------


def test_orient_shapes():
    v = np.zeros((4, 6, 8))
    assert geo.orient(v, 1).shape == (4, 6, 8)
    assert geo.orient(v, 2).shape == (4, 8, 6)
    assert geo.orient(v, 3).shape == (8, 6, 4)


def test_orient_identity_is_same_object():
    v = np.ones((3, 3, 3))
    assert geo.orient(v, 1) is v
    assert geo.orient_inverse(v, 1) is v


@pytest.mark.parametrize("v", [1, 2, 3])
def test_orient_roundtrip_bitwise(v):
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, 6, 8))
    back = geo.orient_inverse(geo.orient(x, v), v)
    assert back.shape == x.shape
    assert np.array_equal(back, x)
    fwd = geo.orient(geo.orient_inverse(x, v), v)
    assert np.array_equal(fwd, x)


@pytest.mark.parametrize("v", [2, 3])
def test_orient_is_permutation(v):
    # every voxel value must appear exactly once
    x = np.arange(4 * 6 * 8, dtype=float).reshape(4, 6, 8)
    y = geo.orient(x, v)
    assert np.array_equal(np.sort(y.ravel()), x.ravel())


@pytest.mark.parametrize("v", [1, 2, 3])
def test_orient_tensor_matches_numpy(v):
    rng = np.random.default_rng(12)
    x = rng.normal(size=(4, 6, 8))
    ref = geo.orient(x, v)
    out = geo.orient(Tensor(x), v)
    assert np.array_equal(out.data, np.asarray(ref))
    ref_i = geo.orient_inverse(x, v)
    out_i = geo.orient_inverse(Tensor(x), v)
    assert np.array_equal(out_i.data, np.asarray(ref_i))


def test_orient_inverse_grad_is_forward_permutation():
    # the adjoint of a permutation is its inverse, so the gradient of
    # orient_inverse is the forward orient applied to the output gradient
    rng = np.random.default_rng(13)
    x = Tensor(rng.normal(size=(4, 6, 8)), requires_grad=True)
    y = geo.orient_inverse(x, 2)
    g = rng.normal(size=y.shape)
    (y * Tensor(g)).sum().backward()
    assert_allclose(x.grad, geo.orient(g, 2), atol=0)


def test_orient_rejects_bad_index():
    with pytest.raises(ValueError):
        geo.orient(np.zeros((2, 2, 2)), 4)
    with pytest.raises(ValueError):
        geo.orient_inverse(np.zeros((2, 2, 2)), 0)


# ---- rotate_inplane -------------------------------------------------------


def test_rotate_zero_is_identity_bitwise():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(7, 7, 3))
    assert np.array_equal(geo.rotate_inplane(x, 0.0), x)


def test_rotate_hand_example_plus90():
    out = geo.rotate_inplane(np.array([[1.0, 2.0], [3.0, 4.0]]), 90.0)
    assert np.array_equal(out, [[2.0, 4.0], [1.0, 3.0]])


@pytest.mark.parametrize("k", [1, 2, 3, -1])
def test_rotate_quarter_turns_match_rot90(k):
    rng = np.random.default_rng(15)
    for n in (2, 5, 8):
        x = rng.normal(size=(n, n))
        out = geo.rotate_inplane(x, 90.0 * k)
        assert np.array_equal(out, np.rot90(x, k))


def test_rotate_applies_per_slice():
    rng = np.random.default_rng(16)
    x = rng.normal(size=(6, 6, 4))
    out = geo.rotate_inplane(x, 23.0)
    for z in range(4):
        assert_allclose(out[:, :, z], geo.rotate_inplane(x[:, :, z], 23.0),
                        atol=1e-15)


def test_rotate_linearity():
    rng = np.random.default_rng(17)
    x = rng.normal(size=(9, 9))
    y = rng.normal(size=(9, 9))
    lhs = geo.rotate_inplane(2.5 * x - 1.25 * y, 37.0)
    rhs = 2.5 * geo.rotate_inplane(x, 37.0) - 1.25 * geo.rotate_inplane(y, 37.0)
    assert_allclose(lhs, rhs, atol=1e-12)


def test_rotate_mass_conservation_on_smooth_support():
    # bilinear column sums carry Moire ripple whose inner product with the
    # volume only vanishes once the support spans many ripple wavelengths,
    # so this needs a compact smooth bump on a reasonably fine grid
    n = 96
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    c = (n - 1) / 2.0
    r2 = (ii - c) ** 2 + (jj - c) ** 2
    x = np.clip(1.0 - r2 / 38.0**2, 0.0, None) ** 3
    x = np.stack([x, 0.5 * x], axis=2)
    for ang in (17.0, 45.0, -61.352, 80.0):
        out = geo.rotate_inplane(x, ang)
        assert abs(out.sum() - x.sum()) <= 1e-6 * x.sum()


def test_rotate_forward_backward_blur_bound():
    x = gaussian_blob(32, sigma=4.0)[:, :, 0]
    for ang in (30.0, 45.0, 77.7):
        back = geo.rotate_inplane(geo.rotate_inplane(x, ang), -ang)
        rel = np.linalg.norm(back - x) / np.linalg.norm(x)
        assert rel <= 0.05


def test_rotate_rejects_nonsquare():
    with pytest.raises(ValueError):
        geo.rotate_inplane(np.zeros((3, 4)), 10.0)
    with pytest.raises(ValueError):
        geo.rotate_inplane(np.zeros((3, 4, 5)), 10.0)


def test_rotate_tensor_matches_numpy_and_grad_is_adjoint():
    rng = np.random.default_rng(18)
    x = rng.normal(size=(8, 8, 2))
    ref = geo.rotate_inplane(x, 33.0)
    xt = Tensor(x, requires_grad=True)
    out = geo.rotate_inplane(xt, 33.0)
    assert np.array_equal(out.data, ref)

    g = rng.normal(size=out.shape)
    (out * Tensor(g)).sum().backward()
    _, ST = geo.rotation_matrix(8, 33.0)
    expect = (ST @ g.reshape(64, -1)).reshape(8, 8, 2)
    assert_allclose(xt.grad, expect, atol=1e-14)


def test_rotation_matrix_rows_sum_to_one_in_interior():
    # interior output pixels read a full bilinear footprint, so their row
    # weights form a partition of unity
    n = 16
    S, _ = geo.rotation_matrix(n, 29.0)
    rowsum = np.asarray(S.sum(axis=1)).ravel().reshape(n, n)
    c = (n - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    interior = (ii - c) ** 2 + (jj - c) ** 2 <= (n / 2.0 - 2.0) ** 2
    assert_allclose(rowsum[interior], 1.0, atol=1e-12)


def test_rotation_matrix_cache_returns_same_object():
    a = geo.rotation_matrix(6, 12.5)
    b = geo.rotation_matrix(6, 12.5)
    assert a[0] is b[0] and a[1] is b[1]
