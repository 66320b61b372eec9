import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from muvie import toyscenes as ts
from muvie.dataset import DatasetError, load_dataset, read_pfm, write_pfm


@settings(max_examples=25)
@given(arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3])),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_pfm_round_trip_is_exact(tmp_path_factory, data):
    p = tmp_path_factory.mktemp("pfm") / "x.pfm"
    write_pfm(p, data)
    np.testing.assert_array_equal(read_pfm(p), data)


def test_pfm_header_is_little_endian(tmp_path):
    write_pfm(tmp_path / "x.pfm", np.ones((2, 3, 1), np.float32))
    raw = (tmp_path / "x.pfm").read_bytes()
    assert raw.startswith(b"Pf\n3 2\n-1.0\n")


def test_pfm_errors(tmp_path):
    with pytest.raises(DatasetError, match="missing"):
        read_pfm(tmp_path / "nope.pfm")
    (tmp_path / "bad.pfm").write_bytes(b"P6\n1 1\n-1.0\n\0\0\0\0")
    with pytest.raises(DatasetError, match="bad.pfm"):
        read_pfm(tmp_path / "bad.pfm")
    (tmp_path / "short.pfm").write_bytes(b"Pf\n2 2\n-1.0\n\0\0\0\0")
    with pytest.raises(DatasetError, match="shape mismatch"):
        read_pfm(tmp_path / "short.pfm")
    with pytest.raises(ValueError):
        write_pfm(tmp_path / "x.pfm", np.zeros((2, 2, 2)))


def test_dataset_round_trip(tmp_path):
    spec = ts.random_scene(4, with_plane=True)
    orbit = ts.Orbit()
    ts.generate_dataset(spec, 8, orbit, tmp_path / "s")
    scene = load_dataset(tmp_path / "s")
    assert scene.held_out == [0] and scene.train == list(range(1, 8))
    assert scene.spec == spec
    for i, b in enumerate(scene.bundles):
        ref = ts.render_ground_truth(spec, b.view)
        np.testing.assert_array_equal(b.sl, ref.sl)
        assert np.abs(b.rgb - ref.rgb).max() <= 1 / 255 + 1e-7
        for t in ("sn", "sh", "ed", "kp", "depth"):
            np.testing.assert_array_equal(getattr(b, t), getattr(ref, t))
        np.testing.assert_allclose(b.pose.camera_to_world, orbit.pose(orbit.angles(8)[i]).camera_to_world)
        assert b.meta["orbit_angle_deg"] == pytest.approx(45.0 * i)


def test_corrupt_pose_file_is_named(tmp_path):
    ts.generate_dataset(ts.random_scene(1), 6, ts.Orbit(), tmp_path / "s", n_views=3)
    poses = tmp_path / "s" / "poses.json"
    poses.write_text("{not json")
    with pytest.raises(DatasetError, match="poses.json"):
        load_dataset(tmp_path / "s")
    poses.write_text(json.dumps({"intrinsics": {}, "frames": []}))
    with pytest.raises(DatasetError, match="poses.json"):
        load_dataset(tmp_path / "s")


def test_missing_and_mismatched_frames(tmp_path):
    ts.generate_dataset(ts.random_scene(1), 6, ts.Orbit(), tmp_path / "s", n_views=3)
    (tmp_path / "s" / "frames" / "kp_0002.pfm").unlink()
    with pytest.raises(DatasetError, match="kp_0002"):
        load_dataset(tmp_path / "s")
    write_pfm(tmp_path / "s" / "frames" / "kp_0002.pfm", np.zeros((5, 5), np.float32))
    with pytest.raises(DatasetError, match="shape mismatch"):
        load_dataset(tmp_path / "s")
