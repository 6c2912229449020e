"""Unit tests for the rigid-alignment 3D metric and the 2D metric."""
import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from poselift import pose_error_2d, pose_error_3d, rigid_align
from poselift.scenarios import sample_pose_bank


def test_rigid_align_recovers_known_transform():
    pose = sample_pose_bank(1, seed=0)[0]
    rot = Rotation.from_euler("xyz", [20, 45, -10], degrees=True).as_matrix()
    moved = pose @ rot.T + np.array([100.0, -50.0, 30.0])
    t = rigid_align(pose, moved)
    np.testing.assert_allclose(t.rotation, rot, atol=1e-9)
    np.testing.assert_allclose(t.apply(pose), moved, atol=1e-6)
    assert np.linalg.det(t.rotation) == pytest.approx(1.0)


def test_rigid_align_with_scale():
    pose = sample_pose_bank(1, seed=1)[0]
    scaled = pose * 1.7 + 5.0
    assert pose_error_3d(pose, scaled, allow_scale=True) == pytest.approx(0.0, abs=1e-6)
    assert pose_error_3d(pose, scaled, allow_scale=False) > 1.0


def test_rigid_align_excludes_reflection():
    pose = sample_pose_bank(1, seed=2)[0]
    mirrored = pose * np.array([-1.0, 1.0, 1.0])
    assert pose_error_3d(pose, mirrored) > 1.0  # cannot be explained rigidly


def test_metric_errors():
    pose = sample_pose_bank(1, seed=3)[0]
    with pytest.raises(ValueError, match="shape mismatch"):
        pose_error_3d(pose, pose[:5])
    line = np.zeros((14, 3))
    line[:, 0] = np.arange(14)
    with pytest.raises(ValueError, match="collinear"):
        pose_error_3d(line, line)


def test_pose_error_2d():
    a = np.zeros((14, 2))
    b = np.zeros((14, 2))
    b[:, 0] = 3.0
    b[:, 1] = 4.0
    assert pose_error_2d(a, b) == pytest.approx(5.0)
    with pytest.raises(ValueError, match="shape mismatch"):
        pose_error_2d(a, b[:3])
