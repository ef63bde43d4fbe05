"""Tests for phantom generation, volume files, and manifests."""

import json

import numpy as np
import pytest

from projseg import phantoms as ph


def test_spec_validation():
    for bad in (dict(size=4), dict(noise=-0.1), dict(separation=0.0),
                dict(target_semiaxis=(0.2, 0.1)), dict(seed=-1),
                dict(target_intensity=(0.0, 0.5)), dict(d3=4)):
        with pytest.raises(ValueError):
            ph.PhantomSpec(**bad)
    assert ph.PhantomSpec(size=32).axial == 32
    assert ph.PhantomSpec(size=32, d3=16).axial == 16


def test_generation_is_deterministic():
    spec = ph.PhantomSpec(size=32, seed=5)
    a_vol, a_mask = ph.generate_phantom(spec, 3)
    b_vol, b_mask = ph.generate_phantom(spec, 3)
    assert np.array_equal(a_vol.data, b_vol.data)
    assert np.array_equal(a_mask.data, b_mask.data)
    c_vol, _ = ph.generate_phantom(spec, 4)
    assert not np.array_equal(a_vol.data, c_vol.data)


def test_noiseless_volume_positive_exactly_on_mask():
    spec = ph.PhantomSpec(size=32, noise=0.0, seed=1)
    vol, mask = ph.generate_phantom(spec, 0)
    assert np.array_equal(vol.data > 0, mask.data > 0)


def test_volume_normalized_and_mask_binary():
    spec = ph.PhantomSpec(size=32, seed=2)
    vol, mask = ph.generate_phantom(spec, 1)
    assert vol.data.min() >= 0.0
    assert vol.data.max() == 1.0
    assert set(np.unique(mask.data)) <= {0.0, 1.0}
    assert mask.data.sum() > 0


def test_volume_fraction_matches_semiaxes():
    spec = ph.PhantomSpec(size=48, seed=3)
    for i in range(5):
        _, mask = ph.generate_phantom(spec, i)
        _, semi, _ = ph.phantom_geometry(spec, i)["target"]
        analytic = 4.0 / 3.0 * np.pi * np.prod(semi) / 48 ** 3
        assert abs(mask.data.mean() - analytic) <= 0.1 * analytic


def test_target_stays_inside_inscribed_cylinder():
    spec = ph.PhantomSpec(size=32, seed=4)
    cc = (32 - 1) / 2.0
    for i in range(5):
        _, mask = ph.generate_phantom(spec, i)
        ii, jj, _ = np.nonzero(mask.data)
        r = np.hypot(ii - cc, jj - cc)
        assert r.max() <= 16.0 - 1.0


def test_confounder_contract():
    spec = ph.PhantomSpec(size=48, seed=7, confounder=True)
    for i in range(5):
        vol, mask = ph.generate_phantom(spec, i)
        geom = ph.phantom_geometry(spec, i)
        (tc, ts, ti) = geom["target"]
        (cc_, cs, ci) = geom["confounder"]
        conf = ph._ellipsoid(vol.shape, cc_, cs)
        # brighter than any target voxel, and disjoint from the mask
        assert vol.data[conf].min() > vol.data[mask.data > 0].max()
        assert not np.any(conf & (mask.data > 0))
        # separated along the transverse axis, either side
        sep = abs(cc_[1] - tc[1])
        assert sep >= 0.2 * 48
        assert sep - cs[1] - ts[1] >= 2.0


def test_confounder_side_varies():
    # over many draws the confounder lands on both transverse sides;
    # a fixed side would hand position away as a segmentation cue
    spec = ph.PhantomSpec(size=32, seed=7, confounder=True)
    signs = {np.sign(ph.phantom_geometry(spec, i)["confounder"][0][1]
                     - ph.phantom_geometry(spec, i)["target"][0][1])
             for i in range(12)}
    assert signs == {-1.0, 1.0}


def test_confounder_covers_target_axially():
    spec = ph.PhantomSpec(size=32, seed=9, confounder=True)
    for i in range(8):
        geom = ph.phantom_geometry(spec, i)
        (tc, ts, _), (cc_, cs, _) = geom["target"], geom["confounder"]
        zt0, zt1 = tc[2] - ts[2], tc[2] + ts[2]
        zc0, zc1 = cc_[2] - cs[2], cc_[2] + cs[2]
        cover = (min(zt1, zc1) - max(zt0, zc0)) / (zt1 - zt0)
        assert cover >= 0.75


def test_confounder_projection_mass_premise():
    # at 0 deg the plain projection puts more total intensity over the
    # confounder's transverse columns than over the target's
    spec = ph.PhantomSpec(size=48, seed=11, confounder=True)
    for i in range(3):
        vol, _ = ph.generate_phantom(spec, i)
        geom = ph.phantom_geometry(spec, i)
        proj = vol.data.sum(axis=0)  # (d2, d3)

        def col_mass(center, semi):
            lo = int(np.floor(center[1] - semi[1]))
            hi = int(np.ceil(center[1] + semi[1])) + 1
            return proj[lo:hi].sum()

        assert (col_mass(*geom["confounder"][:2])
                > col_mass(*geom["target"][:2]))


def test_impossible_spec_errors_after_rejections():
    spec = ph.PhantomSpec(size=32, confounder=True, separation=0.9)
    with pytest.raises(RuntimeError, match="100"):
        ph.generate_phantom(spec, 0)


def test_negative_index_rejected():
    with pytest.raises(ValueError):
        ph.generate_phantom(ph.PhantomSpec(size=32), -1)


def test_volume_type_validation():
    with pytest.raises(ValueError):
        ph.Volume(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        ph.Volume(np.zeros((1, 4, 4)))
    with pytest.raises(ValueError):
        ph.Volume(np.full((4, 4, 4), np.nan))
    with pytest.raises(ValueError):
        ph.Volume(np.zeros((4, 4, 4)), spacing=(1.0, 0.0, 1.0))


# ---- file round trips -------------------------------------------------------


def test_volume_file_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    vol = ph.Volume(rng.normal(size=(8, 8, 8)), spacing=(1.0, 1.5, 2.0),
                    id="s001")
    path = tmp_path / "s001.vol"
    ph.write_volume(vol, path)
    back = ph.read_volume(path)
    assert back.data.tobytes() == vol.data.tobytes()
    assert back.spacing == vol.spacing
    assert back.id == "s001"


def test_mask_file_roundtrip(tmp_path):
    mask = ph.Volume((np.random.default_rng(1).uniform(size=(4, 6, 8)) > 0.5)
                     .astype(np.float64), id="s002")
    path = tmp_path / "s002.mask"
    ph.write_volume(mask, path)
    back = ph.read_volume(path)
    assert np.array_equal(back.data, mask.data)


def test_mask_write_rejects_nonbinary(tmp_path):
    with pytest.raises(ValueError):
        ph.write_volume(ph.Volume(np.full((4, 4, 4), 0.5)),
                        tmp_path / "x.mask")


def test_payload_size_mismatch_names_both_sizes(tmp_path):
    vol = ph.Volume(np.zeros((4, 6, 8)), id="t")
    path = tmp_path / "t.vol"
    ph.write_volume(vol, path)
    blob = path.read_bytes()
    assert len(blob) == 192 * 8
    path.write_bytes(blob[:-8])  # 191 elements
    with pytest.raises(ValueError, match="1528.*1536|1536.*1528"):
        ph.read_volume(path)


def test_missing_sidecar_error(tmp_path):
    path = tmp_path / "x.vol"
    path.write_bytes(b"\x00" * 8)
    with pytest.raises(FileNotFoundError):
        ph.read_volume(path)


def test_mask_read_rejects_out_of_range(tmp_path):
    path = tmp_path / "m.mask"
    path.write_bytes(bytes([0, 1, 2, 0, 1, 0, 1, 0]))
    ph._sidecar_path(path).write_text(json.dumps(
        {"dims": [2, 2, 2], "dtype": "u8", "spacing": [1, 1, 1], "id": "m"}))
    with pytest.raises(ValueError):
        ph.read_volume(path)


# ---- manifests --------------------------------------------------------------


def write_pair(directory, vid, shape=(8, 8, 8), seed=0):
    rng = np.random.default_rng(seed)
    ph.write_volume(ph.Volume(rng.uniform(size=shape), id=vid),
                    directory / f"{vid}.vol")
    ph.write_volume(ph.Volume((rng.uniform(size=shape) > 0.7)
                              .astype(np.float64), id=vid),
                    directory / f"{vid}.mask")


def test_build_manifest_sorted(tmp_path):
    for vid in ("c3", "a1", "b2"):
        write_pair(tmp_path, vid)
    manifest = ph.build_manifest(tmp_path)
    assert [e["id"] for e in manifest.entries] == ["a1", "b2", "c3"]
    assert len(manifest) == 3


def test_build_manifest_orphan_error(tmp_path):
    write_pair(tmp_path, "good")
    ph.write_volume(ph.Volume(np.zeros((4, 4, 4)), id="lone"),
                    tmp_path / "lone.vol")
    with pytest.raises(ValueError, match="lone"):
        ph.build_manifest(tmp_path)


def test_build_manifest_empty_dir(tmp_path):
    manifest = ph.build_manifest(tmp_path)
    assert len(manifest) == 0


def test_build_manifest_dim_mismatch(tmp_path):
    ph.write_volume(ph.Volume(np.zeros((4, 4, 4)), id="x"),
                    tmp_path / "x.vol")
    ph.write_volume(ph.Volume(np.zeros((4, 4, 6)), id="x"),
                    tmp_path / "x.mask")
    with pytest.raises(ValueError):
        ph.build_manifest(tmp_path)


def test_manifest_save_load_roundtrip(tmp_path):
    for vid in ("a", "b"):
        write_pair(tmp_path, vid)
    manifest = ph.build_manifest(tmp_path, seed=42, tags={"confounder": True})
    ph.save_manifest(manifest)
    back = ph.load_manifest(tmp_path)
    assert back.entries == manifest.entries
    assert back.seed == 42
    assert back.tags == {"confounder": True}


def test_load_manifest_missing_file_error(tmp_path):
    write_pair(tmp_path, "a")
    ph.save_manifest(ph.build_manifest(tmp_path))
    (tmp_path / "a.mask").unlink()
    with pytest.raises(FileNotFoundError):
        ph.load_manifest(tmp_path)


def test_load_pairs(tmp_path):
    for vid in ("a", "b"):
        write_pair(tmp_path, vid, seed=ord(vid))
    pairs = ph.load_pairs(tmp_path)
    assert [p[2] for p in pairs] == ["a", "b"]
    assert pairs[0][0].shape == (8, 8, 8)
    assert set(np.unique(pairs[0][1])) <= {0.0, 1.0}
