"""poselift: 3D human pose lifting from 2D joint observations.

Combines nearest-neighbor retrieval from a normalized motion-capture
database with joint-set-robust pictorial-structure refinement and a
weighted three-term energy minimization, iterated to convergence.
"""
from .skeleton import (
    DEFAULT_SKELETON,
    JOINT_SET_LABELS,
    Pose2D,
    Pose3D,
    RetargetMap,
    Skeleton,
    apply_retarget,
    deduplicate,
    fit_retarget_map,
    limb_lengths,
    load_skeleton_file,
    validate_skeleton,
)
from .mocap import (
    MoCapIndex,
    NormalizedPose2D,
    NormalizedPose3D,
    VirtualCamera,
    build_index,
    knn_query,
    load_pose_database,
    normalize_pose2d,
    normalize_pose3d,
    project_orthographic,
    virtual_cameras,
)
from .psm import (
    GMMBinary,
    PsmModel,
    UnaryMap,
    eval_binary,
    fit_binaries,
    infer_map,
    refine_pose,
    synthesize_unaries,
)
from .lifter import (
    CameraModel,
    EnergyParams,
    Intrinsics,
    LiftResult,
    PoseSubspace,
    compute_weights,
    energy_a,
    energy_p,
    energy_r,
    estimate_3d,
    estimate_projection,
    fit_pca,
    minimize_energy,
    project_pose,
    select_joint_set_energy,
    total_energy,
)
from .evaluate import RigidTransform, pose_error_2d, pose_error_3d, rigid_align
from .scenarios import Report, Scenario, generate_scenario, run_experiment, sample_pose_bank

__version__ = "0.1.0"
