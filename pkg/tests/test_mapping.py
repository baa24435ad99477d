import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gprmap import mapping as mp
from gprmap.fileio import FormatError
from gprmap.forward import wave_velocity
from gprmap.geometry import Pose, interpolate_pose, rot_y, rot_z
from gprmap.gprnet import GprNet, GprNetConfig
from gprmap.parnet import Detection
from gprmap.scene import (SOILS, SceneConfig, Trajectory, generate_grid_trajectory, generate_scene,
                          top_surface_depth)

angles = st.floats(-np.pi, np.pi, allow_nan=False)


@given(angles, angles, st.floats(0.01, 3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_depth_to_world_matches_rigid_transform(a, b, d, p):
    R = rot_z(a) @ rot_y(b)
    pose = Pose(R, p)
    w = mp.depth_to_world(d, pose)
    np.testing.assert_allclose(pose.inverse_apply(w), [0, 0, d], atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(w - np.asarray(p)), d, rtol=1e-12)


def test_depth_to_world_general_reduces_to_vertical():
    pose = Pose(rot_z(0.3), (1, 2, 0))
    np.testing.assert_allclose(mp.depth_to_world_general(0.7, 0.0, (1, 0, 0), pose), mp.depth_to_world(0.7, pose))
    tilted = mp.depth_to_world_general(1.0, np.pi / 2, (1, 0, 0), Pose())
    np.testing.assert_allclose(tilted, [1, 0, 0], atol=1e-15)
    with pytest.raises(ValueError):
        mp.depth_to_world(0.0, Pose())
    with pytest.raises(ValueError):
        mp.ray_direction(0.2, (0, 0, 1))


def test_pose_validation():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        Pose(np.eye(3) * 2)


def test_interpolate_pose():
    poses = [Pose(np.eye(3), (0, 0, 0), 0), Pose(np.eye(3), (1, 0, 0), 1), Pose(rot_z(0.2), (2, 0, 0), 2)]
    np.testing.assert_allclose(interpolate_pose(poses, 0.25).position, [0.25, 0, 0])
    mid = interpolate_pose(poses, 1.5)
    np.testing.assert_allclose(mid.rotation, rot_z(0.1), atol=1e-12)
    with pytest.raises(IndexError):
        interpolate_pose(poses, 2.5)


def test_pose_csv_round_trip(tmp_path):
    poses = [Pose(rot_z(0.1 * i), (i, 2 * i, 0.5), i) for i in range(4)]
    mp.write_poses(tmp_path / "p.csv", poses)
    back = mp.read_poses(tmp_path / "p.csv")
    for a, b in zip(poses, back):
        np.testing.assert_array_equal(a.rotation, b.rotation)
        np.testing.assert_array_equal(a.position, b.position)
        assert a.index == b.index
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(FormatError):
        mp.read_poses(tmp_path / "bad.csv")


def test_sparse_cloud_from_hand_made_detections():
    traj = generate_grid_trajectory(((0, 1), (0.5, 0.5)), 1.0, 0.1)[0]
    soil = SOILS["sand"]
    dt = 0.05e-9
    y = 2 * 0.6 / (wave_velocity(soil) * dt)
    det = Detection([4, y, 4, 4], [[2, y + 3], [6, y + 3], [4, y]])
    cloud = mp.build_sparse_cloud([mp.SurveyLine("a", [det, det], traj, dt)], soil)
    assert len(cloud) == 1  # the duplicate collapses
    np.testing.assert_allclose(cloud.points[0], [0.4, 0.5, 0.6], atol=1e-12)
    assert cloud.samples[0].bscan_id == "a" and cloud.labels[0] == -1
    far = Detection([40, y, 4, 4], [[38, y + 3], [42, y + 3], [40, y]])
    with pytest.raises(IndexError, match="no pose"):
        mp.build_sparse_cloud([mp.SurveyLine(0, [far], traj, dt)], soil)
    assert len(mp.build_sparse_cloud([], soil)) == 0


def test_oracle_cloud_lies_on_top_surface():
    dt = 0.05e-9
    for seed in range(3):
        scene = generate_scene(seed)
        trajs = generate_grid_trajectory(((0, 2), (0, 2)), 0.2, 0.02, directions=("x", "y"))
        cloud = mp.oracle_sparse_cloud(scene, trajs, dt)
        assert len(cloud) > 0
        top = top_surface_depth(scene, cloud.points[:, 0], cloud.points[:, 1])
        tol = max(wave_velocity(scene.soil) * dt / 2, 0.02)
        assert np.mean(np.abs(cloud.points[:, 2] - top) <= tol) >= 0.95
        assert set(cloud.labels) <= {p.label for p in scene.primitives}


def test_contour_cloud_is_quantized_top_surface():
    scene = generate_scene(5, SceneConfig(one_of_each=True))
    trajs = generate_grid_trajectory(((0, 2), (0, 2)), 0.25, 0.05)
    pts, labs = mp.contour_cloud(scene, trajs, 0.05e-9)
    bin_ = wave_velocity(scene.soil) * 0.05e-9 / 2
    top = top_surface_depth(scene, pts[:, 0], pts[:, 1])
    assert np.all(np.abs(pts[:, 2] - top) <= bin_ / 2 + 1e-12)
    assert len(pts) == len(labs)


def test_complete_map_labels_every_point():
    cfg = GprNetConfig.reduced(n_points=16, resolutions=(4, 8, 32))
    model = GprNet(cfg, seed=0)
    pts = np.random.default_rng(0).uniform(0, 1, (40, 3))
    dense = mp.complete_map(pts, model, seed=1)
    assert dense.points.shape == (cfg.n_dense, 3) and dense.labels.shape == (cfg.n_dense,)
    with pytest.raises(ValueError, match="at least 8"):
        mp.complete_map(pts[:5], model)


def test_trajectory_requires_positive_spacing():
    with pytest.raises(ValueError):
        Trajectory((Pose(),), 0.0)
