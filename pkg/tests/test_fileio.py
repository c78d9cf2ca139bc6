import numpy as np
import pytest

from warptrack import CameraIntrinsics, InputError, PointCloud, back_project
from warptrack.fileio import (
    load_intrinsics,
    load_ply_sequence,
    load_rgbd_frame,
    load_rgbd_sequence,
    read_ply,
    save_color_png,
    save_depth_png,
    save_intrinsics,
    write_ply,
)


@pytest.fixture
def cloud(rng):
    n = 50
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[3] = np.nan
    return PointCloud(
        rng.uniform(-1, 1, size=(n, 3)),
        normals=normals,
        colors=rng.uniform(0, 1, size=(n, 3)),
    )


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip(tmp_path, cloud, binary):
    path = tmp_path / "cloud.ply"
    write_ply(cloud, path, binary=binary)
    back = read_ply(path)
    np.testing.assert_allclose(back.positions, cloud.positions, atol=1e-6)
    valid = np.isfinite(cloud.normals).all(axis=1)
    np.testing.assert_allclose(back.normals[valid], cloud.normals[valid], atol=1e-6)
    assert np.isnan(back.normals[~valid]).all()
    np.testing.assert_allclose(back.colors, cloud.colors, atol=1.0 / 255)


def test_ply_positions_only(tmp_path):
    cloud = PointCloud([[1.0, 2.0, 3.0]])
    path = tmp_path / "p.ply"
    write_ply(cloud, path)
    back = read_ply(path)
    assert back.normals is None and back.colors is None
    np.testing.assert_allclose(back.positions, cloud.positions)


def test_ply_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_bytes(b"not a ply\n")
    with pytest.raises(InputError):
        read_ply(path)


def test_intrinsics_round_trip(tmp_path):
    intr = CameraIntrinsics(fx=525.5, fy=524.0, cx=319.5, cy=239.5, width=640, height=480)
    path = tmp_path / "intrinsics.json"
    save_intrinsics(intr, path)
    assert load_intrinsics(path) == intr


def test_depth_png_round_trip(tmp_path, rng):
    depth = rng.uniform(0.2, 3.0, size=(24, 32))
    depth[0, :5] = 0.0
    path = tmp_path / "depth.png"
    save_depth_png(depth, path, depth_scale=0.001)
    intr = CameraIntrinsics(fx=50, fy=50, cx=16, cy=12, width=32, height=24)
    frame = load_rgbd_frame(path, None, intr, depth_scale=0.001)
    np.testing.assert_allclose(frame.depth, depth, atol=0.0005 + 1e-12)
    assert (frame.depth[0, :5] == 0).all()


def test_rgbd_sequence_back_projects(tmp_path, rng):
    intr = CameraIntrinsics(fx=40, fy=40, cx=8, cy=6, width=16, height=12)
    save_intrinsics(intr, tmp_path / "intrinsics.json")
    for t in range(2):
        depth = rng.uniform(0.5, 2.0, size=(12, 16))
        color = rng.uniform(0, 1, size=(12, 16, 3))
        save_depth_png(depth, tmp_path / f"depth_{t:04d}.png")
        save_color_png(color, tmp_path / f"color_{t:04d}.png")
    frames = load_rgbd_sequence(tmp_path)
    assert len(frames) == 2
    cloud = back_project(frames[0])
    assert cloud.n_points == 12 * 16
    assert cloud.colors is not None


def test_ply_sequence_sorted(tmp_path):
    for name, x in [("b.ply", 2.0), ("a.ply", 1.0)]:
        write_ply(PointCloud([[x, 0, 0]]), tmp_path / name)
    frames = load_ply_sequence(tmp_path)
    assert frames[0].positions[0, 0] == 1.0
    assert frames[1].positions[0, 0] == 2.0


def test_missing_frames_is_input_error(tmp_path):
    with pytest.raises(InputError):
        load_ply_sequence(tmp_path)
    with pytest.raises(InputError):
        load_rgbd_sequence(tmp_path)
