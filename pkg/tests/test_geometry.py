import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from muvie.geometry import (BehindCameraError, BoundsError, CameraIntrinsics, CameraPose, CameraView,
                            DegenerateGeometryError, GeometryError, Ray, generate_rays, positional_encoding,
                            project_point, project_points, view_angle, view_angles, view_tensors)

INTR = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)


def view(pose=None):
    return CameraView(INTR, pose or CameraPose.identity())


def test_principal_axis_ray():
    (ray,) = generate_rays(view(), [(50, 50)])
    np.testing.assert_allclose(ray.direction, [0, 0, 1])
    np.testing.assert_allclose(ray.origin, [0, 0, 0])


def test_off_axis_ray():
    wide = CameraView(CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 200, 101), CameraPose.identity())
    (ray,) = generate_rays(wide, [(150, 50)])
    np.testing.assert_allclose(ray.direction, np.array([1, 0, 1]) / math.sqrt(2))


def test_translated_camera_ray():
    (ray,) = generate_rays(view(CameraPose.from_translation((0, 0, -3))), [(50, 50)])
    np.testing.assert_allclose(ray.origin, [0, 0, -3])
    np.testing.assert_allclose(ray.direction, [0, 0, 1])


def test_pixel_out_of_bounds():
    with pytest.raises(BoundsError):
        generate_rays(view(), [(101, 3)])
    with pytest.raises(BoundsError):
        generate_rays(view(), [(3, -0.5)])


def test_project_point_examples():
    assert project_point((0, 0, 2), view()) == pytest.approx((50, 50, 2))
    assert project_point((1, 0, 2), view()) == pytest.approx((100, 50, 2))
    with pytest.raises(BehindCameraError):
        project_point((0, 0, -1), view())


def test_positional_encoding_examples():
    np.testing.assert_allclose(positional_encoding(0.0, 2), [0, 1, 0, 1], atol=1e-12)
    np.testing.assert_allclose(positional_encoding(1.0, 1), [0, -1], atol=1e-12)
    np.testing.assert_allclose(positional_encoding(0.5, 2), [1, 0, 0, -1], atol=1e-12)
    with pytest.raises(ValueError):
        positional_encoding(0.0, 0)


def test_positional_encoding_torch_matches_numpy():
    x = np.linspace(-2, 2, 12).reshape(4, 3)
    a = positional_encoding(x, 3)
    b = positional_encoding(torch.tensor(x), 3).numpy()
    assert a.shape == (4, 18)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_view_angle_examples():
    ray = Ray(np.zeros(3), np.array([0.0, 0, 1]))
    assert view_angle(ray, (0, 0, -1), (0, 0, 2)) == pytest.approx(0.0, abs=1e-7)
    assert view_angle(ray, (2, 0, 2), (0, 0, 2)) == pytest.approx(math.pi / 2)
    assert view_angle(ray, (1, 0, 1), (0, 0, 2)) == pytest.approx(math.pi / 4)
    with pytest.raises(DegenerateGeometryError):
        view_angle(ray, (1, 1, 1), (1, 1, 1))


def test_intrinsics_and_pose_validation():
    with pytest.raises(GeometryError):
        CameraIntrinsics(0.0, 1.0, 1, 1, 4, 4)
    with pytest.raises(GeometryError):
        CameraIntrinsics(1.0, 1.0, 4, 1, 4, 4)
    bad = np.eye(4)
    bad[0, 0] = -1  # reflection
    with pytest.raises(GeometryError):
        CameraPose(bad)
    bad = np.eye(4)
    bad[3, 0] = 1
    with pytest.raises(GeometryError):
        CameraPose(bad)


def test_look_at_points_camera_at_target():
    pose = CameraPose.look_at((3.0, 1.0, 2.0), (0.0, 0.0, 0.0))
    u, v, d = project_point((0, 0, 0), CameraView(INTR, pose))
    assert (u, v) == pytest.approx((50, 50))
    assert d == pytest.approx(math.sqrt(14))


unit = st.floats(-1, 1, allow_nan=False)


@st.composite
def random_pose(draw):
    q = np.array([draw(unit) for _ in range(4)]) + np.array([1e-3, 0, 0, 0])
    q /= np.linalg.norm(q)
    w, x, y, z = q
    r = np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                  [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                  [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = [draw(st.floats(-5, 5)) for _ in range(3)]
    return CameraPose(m)


@given(random_pose(), st.floats(0, 100), st.floats(0, 100), st.floats(0.01, 50))
def test_ray_projection_round_trip(pose, u, v, t):
    vw = CameraView(INTR, pose)
    (ray,) = generate_rays(vw, [(u, v)])
    assert np.linalg.norm(ray.direction) == pytest.approx(1.0, abs=1e-6)
    pu, pv, _ = project_point(ray.origin + t * ray.direction, vw)
    assert abs(pu - u) < 1e-4 and abs(pv - v) < 1e-4


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=5), st.integers(1, 8))
def test_positional_encoding_bounded(xs, n):
    out = positional_encoding(np.array(xs), n)
    assert out.shape == (len(xs) * 2 * n,)
    assert np.all(np.abs(out) <= 1.0)


@given(st.tuples(unit, unit, unit), st.tuples(unit, unit, unit), st.floats(0.01, 100))
def test_view_angle_scale_invariant(c, q, s):
    c, q = np.array(c), np.array(q)
    if np.linalg.norm(q - c) < 1e-3:
        return
    ray = Ray(np.zeros(3), np.array([0.3, -0.2, 0.9]))
    a = view_angle(ray, c, q)
    b = view_angle(ray, c, c + s * (q - c))
    assert 0 <= a <= math.pi
    assert a == pytest.approx(b, abs=1e-6)


def test_batched_projection_matches_scalar():
    rng = np.random.default_rng(0)
    views = [CameraView(INTR, CameraPose.look_at(rng.normal(size=3) * 4, (0, 0, 0))) for _ in range(3)]
    k, w2c, centers = view_tensors(views, torch.float64)
    pts = torch.tensor(rng.normal(size=(7, 3)) * 0.5)
    uv, z, valid = project_points(pts, k, w2c, INTR.width, INTR.height)
    for i, vw in enumerate(views):
        for p in range(7):
            u, v, d = project_point(pts[p].numpy(), vw)
            np.testing.assert_allclose(uv[i, p].numpy(), [u, v], atol=1e-9)
            assert z[i, p].item() == pytest.approx(d)
            assert bool(valid[i, p]) == (0 <= u <= 100 and 0 <= v <= 100)
    dirs = torch.tensor(rng.normal(size=(7, 3)))
    ang = view_angles(dirs, pts, centers)
    for i, vw in enumerate(views):
        for p in range(7):
            ref = view_angle(Ray(np.zeros(3), dirs[p].numpy()), vw.pose.center, pts[p].numpy())
            assert ang[i, p].item() == pytest.approx(ref, abs=1e-9)


def test_batched_projection_flags_points_behind():
    k, w2c, _ = view_tensors([view()], torch.float64)
    _, _, valid = project_points(torch.tensor([[0.0, 0, -1], [0, 0, 1]], dtype=torch.float64), k, w2c, 101, 101)
    assert valid.tolist() == [[False, True]]
