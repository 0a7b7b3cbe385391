import filecmp
import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdsinpaint.field import Camera, render_view
from cdsinpaint.scenes import (DegenerateSceneError, ManifestError, MaskedView, MissingAssetError, NoManifestError,
                               PoseError, SceneBundle, SceneError, SceneSpec, ShapeMismatchError,
                               _camera, build_synthetic, dilate_mask, hidden_probe_points, load_scene, read_depth,
                               read_mask, read_rgb, save_scene, synth_scene, train_angles, voxelize, write_depth)

SMALL = SceneSpec(resolution=16, n_train=6, n_test=2)


def small_scene(seed=0, **kw):
    spec = SceneSpec(**{**SMALL.__dict__, **kw})
    return synth_scene(spec, np.random.default_rng(seed))


def tree_files(root):
    return sorted(os.path.relpath(os.path.join(d, f), root) for d, _, fs in os.walk(root) for f in fs)


# ------------------------------------------------------------------ dilation


def brute_dilate(mask, k=3, iterations=3):
    r = k // 2
    m = mask.copy()
    H, W = m.shape
    for _ in range(iterations):
        out = np.zeros_like(m)
        for i in range(H):
            for j in range(W):
                out[i, j] = m[max(i - r, 0):i + r + 1, max(j - r, 0):j + r + 1].any()
        m = out
    return m


def test_dilate_trivial_cases():
    assert not dilate_mask(np.zeros((5, 5), bool)).any()
    m = np.zeros((5, 5), bool)
    m[0, 2] = True
    out = dilate_mask(m, 3, 1)
    expect = np.zeros((5, 5), bool)
    expect[0:2, 1:4] = True
    assert np.array_equal(out, expect)
    with pytest.raises(ValueError):
        dilate_mask(m, 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.2), st.sampled_from([1, 3, 5]), st.integers(1, 3))
def test_dilate_matches_brute_force(seed, p, k, it):
    m = np.random.default_rng(seed).random((11, 13)) < p
    out = dilate_mask(m, k, it)
    assert np.array_equal(out, brute_dilate(m, k, it))
    assert np.all(out >= m)  # monotone


def test_dilation_saturates():
    m = np.zeros((9, 9), bool)
    m[4, 4] = True
    prev = m
    for _ in range(10):
        prev = dilate_mask(prev, 3, 1)
    assert prev.all() and np.array_equal(dilate_mask(prev, 3, 1), prev)


# ---------------------------------------------------------------- file I/O


def test_round_trip(tmp_path):
    b = small_scene()
    save_scene(b, tmp_path)
    c = load_scene(tmp_path)
    assert len(c.train_views) == 6 and len(c.test_views) == 2 and c.concept == b.concept
    for u, v in zip(b.train_views + b.test_views, c.train_views + c.test_views):
        assert np.max(np.abs(u.rgb - v.rgb)) <= 0.5 / 255 + 1e-12
        assert np.max(np.abs(u.depth - v.depth)) <= 1e-6 * max(1.0, np.abs(u.depth).max())
        assert np.max(np.abs(u.camera.world_from_camera - v.camera.world_from_camera)) <= 1e-6
        assert np.array_equal(u.mask, v.mask)
    assert np.array_equal(b.bbox, c.bbox)


def test_saving_twice_is_byte_identical(tmp_path):
    b = small_scene(3)
    save_scene(b, tmp_path / "a")
    save_scene(b, tmp_path / "b")
    files = tree_files(tmp_path / "a")
    assert files == tree_files(tmp_path / "b")
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    assert not mismatch and not errors


def test_same_seed_same_bytes(tmp_path):
    save_scene(small_scene(7), tmp_path / "a")
    save_scene(small_scene(7), tmp_path / "b")
    files = tree_files(tmp_path / "a")
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    assert not mismatch and not errors
    save_scene(small_scene(8), tmp_path / "c")
    _, mismatch, _ = filecmp.cmpfiles(tmp_path / "a", tmp_path / "c", files, shallow=False)
    assert mismatch


def test_minimal_one_view_bundle(tmp_path):
    b = small_scene()
    one = SceneBundle(b.train_views[:1], [], b.concept, b.bbox)
    manifest = save_scene(one, tmp_path)
    assert len(manifest["train"]) == 1 and manifest["test"] == []
    assert tree_files(tmp_path) == ["manifest.json", "train/0000.depth.raw", "train/0000.mask.png",
                                    "train/0000.pose.json", "train/0000.rgb.png"]


def test_shape_violation_rejected_before_write(tmp_path):
    b = small_scene()
    v = b.train_views[0]
    v.rgb = np.zeros((3, 3, 3))  # corrupt after construction
    with pytest.raises(ShapeMismatchError):
        save_scene(b, tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_view_shape_checks():
    cam = _camera(SMALL, 0.0)
    with pytest.raises(ShapeMismatchError):
        MaskedView(np.zeros((16, 16, 3)), np.zeros((15, 16)), np.zeros((16, 16), bool), cam)
    with pytest.raises(ShapeMismatchError):
        MaskedView(np.zeros((16, 16, 3)), -np.ones((16, 16)), np.zeros((16, 16), bool), cam)
    other = Camera(10.0, 10.0, 8, 8, 16, 16, cam.world_from_camera)
    v1 = MaskedView(np.zeros((16, 16, 3)), np.zeros((16, 16)), np.zeros((16, 16), bool), cam)
    v2 = MaskedView(np.zeros((16, 16, 3)), np.zeros((16, 16)), np.zeros((16, 16), bool), other)
    with pytest.raises(ShapeMismatchError):
        SceneBundle([v1, v2], [])


def test_loader_errors(tmp_path):
    with pytest.raises(NoManifestError, match="no manifest"):
        load_scene(tmp_path)
    b = small_scene()
    save_scene(b, tmp_path / "s")
    root = tmp_path / "s"
    (root / "train" / "0002.mask.png").unlink()
    with pytest.raises(MissingAssetError, match="0002.mask.png"):
        load_scene(root)

    save_scene(b, tmp_path / "p")
    pose = json.loads((tmp_path / "p" / "train" / "0001.pose.json").read_text())
    pose["world_from_camera"][0][0] = 3.0
    (tmp_path / "p" / "train" / "0001.pose.json").write_text(json.dumps(pose))
    with pytest.raises(PoseError, match="orthonormal"):
        load_scene(tmp_path / "p")

    save_scene(b, tmp_path / "d")
    write_depth(tmp_path / "d" / "test" / "0000.depth.raw", np.zeros((4, 4)))
    with pytest.raises(ShapeMismatchError):
        load_scene(tmp_path / "d")

    save_scene(b, tmp_path / "m")
    (tmp_path / "m" / "manifest.json").write_text("{not json")
    with pytest.raises(ManifestError):
        load_scene(tmp_path / "m")
    (tmp_path / "m" / "manifest.json").write_text(json.dumps({"format": "other", "version": 1}))
    with pytest.raises(ManifestError):
        load_scene(tmp_path / "m")
    assert issubclass(PoseError, SceneError) and issubclass(MissingAssetError, SceneError)


def test_depth_file_format(tmp_path):
    d = np.arange(12, dtype=np.float64).reshape(3, 4) / 7
    write_depth(tmp_path / "x.raw", d)
    raw = (tmp_path / "x.raw").read_bytes()
    assert raw[:4] == b"ODPT" and len(raw) == 16 + 48
    assert np.int32(int.from_bytes(raw[4:8], "little")) == 4 and int.from_bytes(raw[8:12], "little") == 3
    assert np.array_equal(read_depth(tmp_path / "x.raw"), d.astype(np.float32).astype(np.float64))
    (tmp_path / "bad.raw").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ManifestError):
        read_depth(tmp_path / "bad.raw")


def test_mask_png_is_0_255(tmp_path):
    from PIL import Image
    b = small_scene()
    save_scene(b, tmp_path)
    arr = np.asarray(Image.open(tmp_path / "train" / "0000.mask.png"))
    assert set(np.unique(arr).tolist()) <= {0, 255}
    assert np.array_equal(read_mask(tmp_path / "train" / "0000.mask.png"), b.train_views[0].mask)
    assert read_rgb(tmp_path / "train" / "0000.rgb.png").shape == (16, 16, 3)


# --------------------------------------------------------------- generator


def test_no_occluder_gives_empty_masks_and_clean_renders():
    spec = SceneSpec(**{**SMALL.__dict__, "occluder": False})
    b = synth_scene(spec, np.random.default_rng(1))
    scene = build_synthetic(spec, np.random.default_rng(1))
    for v in b.train_views:
        assert not v.mask.any()
        rgb, depth, _ = scene.render(v.camera, with_occluder=False)
        assert np.array_equal(v.rgb, rgb) and np.array_equal(v.depth, depth)


def test_test_views_are_object_free():
    spec = SMALL
    b = synth_scene(spec, np.random.default_rng(2))
    scene = build_synthetic(spec, np.random.default_rng(2))
    for v in b.test_views:
        rgb, _, idx = scene.render(v.camera, with_occluder=False)
        assert np.array_equal(v.rgb, rgb)
        assert v.mask.any()  # the object's footprint is still marked for faithfulness scoring
    for v in b.train_views:
        assert v.mask.any()


def test_severity_one_hides_background_from_every_training_view():
    spec = SceneSpec(resolution=32, n_train=12, n_test=0, severity=1.0)
    scene = build_synthetic(spec, np.random.default_rng(0))
    pts = hidden_probe_points(scene, spec)
    assert len(pts) >= 4
    for a in train_angles(spec):
        assert scene.occluded(_camera(spec, float(a)).origin, pts).all()


def test_partial_severity_leaves_key_views():
    spec = SceneSpec(resolution=32, n_train=10, n_test=0, severity=0.8)
    scene = build_synthetic(spec, np.random.default_rng(0))
    pts = hidden_probe_points(scene, spec)
    seen = [not scene.occluded(_camera(spec, float(a)).origin, pts).all() for a in train_angles(spec)]
    assert sum(seen) == 2  # exactly the (1 - severity) fraction sees past the occluder
    assert seen[-2:] == [True, True]


def test_occluder_outside_frusta_is_degenerate():
    spec = SceneSpec(**{**SMALL.__dict__, "occluder_center": (0.0, 30.0, 0.0)})
    with pytest.raises(DegenerateSceneError):
        synth_scene(spec, np.random.default_rng(0))


def test_spec_validation():
    with pytest.raises(DegenerateSceneError):
        SceneSpec(resolution=30).validate()
    with pytest.raises(DegenerateSceneError):
        SceneSpec(severity=1.5).validate()
    with pytest.raises(DegenerateSceneError):
        SceneSpec.from_dict({"resolutoin": 32})
    assert SceneSpec.from_dict({"wide_deg": [20, 30]}).wide_deg == (20, 30)


def test_voxelized_scene_depth_matches_analytic_depth():
    spec = SceneSpec(resolution=16, n_train=1, n_test=0)
    scene = build_synthetic(spec, np.random.default_rng(4))
    field = voxelize(scene, resolution=65)
    cam = _camera(spec, 0.0)
    _, depth, idx = scene.render(cam, with_occluder=False)
    n = 512
    v = render_view(field, cam, n)
    voxel = 2.0 / 64  # surfaces are resolved to within one grid cell
    opaque = (v.opacity > 0.999) & (idx >= 0)
    assert opaque.mean() > 0.75
    err = np.abs(v.depth - depth)[opaque]
    # a linear density ramp of slope k past the surface biases depth by about sqrt(pi / 2k)
    assert np.median(err) <= np.sqrt(np.pi / 2e4) + 2.0 / 512
    assert np.mean(err <= voxel) >= 0.95 and err.max() <= 2 * voxel  # silhouettes blur by one cell
