"""Unit tests for skeleton topology, pose containers and deduplication."""
import numpy as np
import pytest

from poselift import (
    DEFAULT_SKELETON,
    JOINT_SET_LABELS,
    Pose3D,
    apply_retarget,
    deduplicate,
    fit_retarget_map,
    limb_lengths,
    load_skeleton_file,
    validate_skeleton,
)
from poselift.skeleton import SkeletonError, root_center
from poselift.scenarios import sample_pose_bank


def test_default_skeleton_is_valid():
    report = validate_skeleton(DEFAULT_SKELETON)
    assert report.ok, report.problems
    assert DEFAULT_SKELETON.n_joints == 14
    assert len(DEFAULT_SKELETON.edges) == 13
    assert DEFAULT_SKELETON.joint_names[DEFAULT_SKELETON.root] == "neck"


def test_joint_sets_cover_expected_labels():
    assert set(JOINT_SET_LABELS) == set(DEFAULT_SKELETON.joint_sets)
    assert tuple(DEFAULT_SKELETON.joint_sets["all"]) == tuple(range(14))
    for label in JOINT_SET_LABELS:
        members = DEFAULT_SKELETON.joint_sets[label]
        assert len(members) > 0
        assert members == tuple(sorted(members))


def test_load_skeleton_file_errors():
    with pytest.raises(ValueError, match="missing 'root'"):
        load_skeleton_file("joint a\njoint b\nedge a b\n")
    with pytest.raises(ValueError, match="bad skeleton file line"):
        load_skeleton_file("joint\n")


def test_validate_flags_cycle_and_disconnection():
    bad = load_skeleton_file(
        "joint a\njoint b\njoint c\nroot a\nedge b a\nedge a b\nset all a b c\n"
    )
    report = validate_skeleton(bad)
    assert not report.ok
    assert any("cycle" in p for p in report.problems)


def test_root_center_moves_hip_midpoint_to_origin():
    pose = sample_pose_bank(1, seed=3)[0] + np.array([10.0, -5.0, 7.0])
    centered = root_center(pose, DEFAULT_SKELETON)
    lh, rh = DEFAULT_SKELETON.hip_indices()
    mid = 0.5 * (centered[lh] + centered[rh])
    np.testing.assert_allclose(mid, 0.0, atol=1e-9)


def test_limb_lengths_translation_invariant():
    pose = sample_pose_bank(1, seed=1)[0]
    a = limb_lengths(Pose3D(pose), DEFAULT_SKELETON)
    b = limb_lengths(Pose3D(pose + 123.0), DEFAULT_SKELETON)
    np.testing.assert_allclose(a, b, atol=1e-9)
    assert a.shape == (13,)
    assert (a > 0).all()


def test_limb_lengths_shape_mismatch():
    with pytest.raises(SkeletonError):
        limb_lengths(Pose3D(np.zeros((5, 3))), DEFAULT_SKELETON)


def test_retarget_identity_recovery():
    bank = sample_pose_bank(10, seed=2)
    pairs = [(Pose3D(p), Pose3D(p)) for p in bank]
    rmap = fit_retarget_map(pairs)
    out = apply_retarget(rmap, Pose3D(bank[0]))
    np.testing.assert_allclose(
        out.joints, root_center(bank[0], DEFAULT_SKELETON), atol=1e-2
    )


def test_retarget_needs_enough_pairs_and_matching_ids():
    bank = sample_pose_bank(4, seed=2)
    with pytest.raises(ValueError, match="insufficient pairs"):
        fit_retarget_map([(Pose3D(bank[0]), Pose3D(bank[0]))])
    rmap = fit_retarget_map([(Pose3D(p), Pose3D(p)) for p in bank])
    with pytest.raises(SkeletonError, match="does not match map source"):
        apply_retarget(rmap, Pose3D(bank[0], skeleton_id="other"))


def test_deduplicate_drops_near_duplicates_and_is_idempotent():
    bank = sample_pose_bank(5, seed=7)
    poses = [Pose3D(p) for p in bank]
    noisy = [Pose3D(bank[0] + 0.1), Pose3D(bank[2] + 0.4)]  # < 1.5 mm away
    kept = deduplicate(poses + noisy, threshold=1.5)
    assert len(kept) == 5
    assert all(k is p for k, p in zip(kept, poses))  # order preserved
    again = deduplicate(kept, threshold=1.5)
    assert len(again) == len(kept)


def test_deduplicate_threshold_zero_keeps_everything():
    bank = sample_pose_bank(4, seed=7)
    poses = [Pose3D(p) for p in bank] + [Pose3D(bank[0] + 1e-6)]
    assert len(deduplicate(poses, threshold=0.0)) == 5
