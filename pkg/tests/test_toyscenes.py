import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from muvie import toyscenes as ts
from muvie.geometry import CameraIntrinsics, CameraPose, CameraView, image_rays

INTR = CameraIntrinsics.from_fov(48, 48, 40.0)


def front_view(distance=4.0):
    return CameraView(INTR, CameraPose.look_at((0.0, -distance, 0.0), (0.0, 0.0, 0.0)))


def one_sphere(light=(0.0, -1.0, 0.0), albedo=(1.0, 0.0, 0.0)):
    return ts.SceneSpec((ts.Sphere((0.0, 0.0, 0.0), 1.0, albedo, 2),), light)


def centre_pixel(m):
    # 48x48 has its principal point between pixels; take the four nearest and average
    return m[23:25, 23:25].mean(axis=(0, 1))


def test_centre_normal_faces_camera():
    view = front_view()
    b = ts.render_ground_truth(one_sphere(), view)
    n_cam = view.pose.rotation.T @ centre_pixel(b.sn)
    np.testing.assert_allclose(n_cam / np.linalg.norm(n_cam), [0, 0, -1], atol=2e-3)


def test_background_pixels():
    b = ts.render_ground_truth(one_sphere(), front_view())
    miss = ~b.valid
    assert miss.any()
    assert np.all(b.sl[miss] == 0) and np.all(b.sh[miss] == 0) and np.all(b.depth[miss] == 0)
    corner = (slice(0, 4), slice(0, 4))
    assert np.all(b.ed[corner] == 0)


def test_lit_front_point_colour():
    # light along the direction towards the camera: n . l = 1 at the front point
    b = ts.render_ground_truth(one_sphere(), CameraView(INTR, CameraPose.look_at((0, -4, 0), (0, 0, 0))))
    # exact front point lies between pixel centres; the Lambert term there is ~1
    rgb = b.rgb[23, 23]
    assert rgb[0] == pytest.approx(1.0)
    assert rgb[1] == pytest.approx(0.1, abs=1e-6) and rgb[2] == pytest.approx(0.1, abs=1e-6)
    assert b.sh[23, 23, 0] == pytest.approx(1.0, abs=1e-3)


def test_spec_validation():
    with pytest.raises(ValueError):
        ts.SceneSpec((ts.Sphere((0, 0, 0), -1.0, (1, 1, 1), 1),), (0, 0, 1))
    with pytest.raises(ValueError):
        ts.SceneSpec((ts.Sphere((0, 0, 0), 1.0, (1, 1, 1), 7),), (0, 0, 1))
    with pytest.raises(ValueError):
        ts.SceneSpec((), (0, 0, 2))


def test_spec_dict_round_trip():
    spec = ts.random_scene(5, with_plane=True)
    assert ts.SceneSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_held_out_rule(tmp_path):
    assert ts.held_out_indices(16) == [0, 8]
    assert ts.held_out_indices(8) == [0]
    ts.generate_dataset(one_sphere(), 8, ts.Orbit(), tmp_path / "s")
    split = json.loads((tmp_path / "s" / "split.json").read_text())
    assert split["held_out"] == [0] and len(split["train"]) == 7


def test_too_few_frames(tmp_path):
    with pytest.raises(ValueError):
        ts.generate_dataset(one_sphere(), 5, ts.Orbit(), tmp_path / "s", n_views=5)


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_generation_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        ts.generate_dataset(ts.random_scene(11), 6, ts.Orbit(), tmp_path / name, n_views=3)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.floats(0, 360), st.booleans())
def test_ground_truth_invariants(seed, angle, plane):
    spec = ts.random_scene(seed, with_plane=plane)
    view = CameraView(INTR, ts.Orbit().pose(angle))
    b = ts.render_ground_truth(spec, view)
    hit = b.valid
    for m in (b.rgb, b.sn, b.sh, b.ed, b.kp, b.depth):
        assert np.isfinite(m).all()
    assert b.sl.max() < spec.n_classes
    np.testing.assert_allclose(np.linalg.norm(b.sn[hit], axis=-1), 1.0, atol=1e-5)
    # shading
    assert b.sh.max() <= 1.0
    ndotl = b.sn[..., :] @ np.asarray(spec.light_direction)
    assert np.all(b.sh[..., 0][hit & (ndotl <= 0)] == 0)
    assert np.all(b.sh[..., 0][hit & (ndotl > 1e-6)] > 0)
    # re-projecting depth reproduces the analytic normal
    o, d = image_rays(view)
    forward = view.pose.rotation[:, 2]
    flat_hit = hit.ravel()
    dist = b.depth.reshape(-1)[flat_hit].astype(np.float64) / (d[flat_hit] @ forward)
    pts = o[flat_hit] + dist[:, None] * d[flat_hit]
    _, _, idx = ts.trace(spec, o[flat_hit], d[flat_hit])
    n = ts.analytic_normal(spec, pts, idx, d[flat_hit])
    np.testing.assert_allclose(n, b.sn.reshape(-1, 3)[flat_hit], atol=1e-4)
    # semantic boundaries are edges
    assert np.all(b.ed[..., 0][ts.label_boundaries(b.sl[..., 0])] > 0)
    for m in (b.ed, b.kp):
        assert m.min() >= 0 and m.max() <= 1


def test_thin_region_is_edge():
    sl = np.zeros((7, 7), dtype=np.uint8)
    sl[:, 3] = 2
    ed = ts.edge_map(sl, np.zeros((7, 7)), 5)
    assert np.all(ed[:, 3] > 0)
