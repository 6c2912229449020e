"""Skeleton topology, pose containers, retargeting and database deduplication.

The library works with a fixed 14-joint body model (head, neck, shoulders,
elbows, wrists, hips, knees, ankles).  The default topology ships as a text
file (``data/default_skeleton.txt``) and is loaded once at import time; all
other modules take a :class:`Skeleton` so alternative conventions can be
plugged in.
"""
from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

import numpy as np

JOINT_SET_LABELS = ("all", "up", "lw", "lt", "rt")


class SkeletonError(ValueError):
    """Raised when a pose and a skeleton do not match."""


@dataclass(frozen=True)
class Skeleton:
    """Kinematic tree over named joints plus joint-set memberships.

    edges are (child, parent) joint-index pairs forming a tree rooted at
    ``root``.  ``joint_sets`` maps a set label to a sorted tuple of joint
    indices; the label ``all`` must cover every joint.
    """

    name: str
    joint_names: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    root: int
    joint_sets: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    def index(self, joint_name: str) -> int:
        return self.joint_names.index(joint_name)

    def set_indices(self, label: str) -> np.ndarray:
        return np.asarray(self.joint_sets[label], dtype=int)

    def hip_indices(self) -> tuple[int, int]:
        return self.index("left_hip"), self.index("right_hip")


@dataclass
class Pose3D:
    """Joint positions in millimeters, shape (n_joints, 3)."""

    joints: np.ndarray
    skeleton_id: str = "default14"

    def __post_init__(self) -> None:
        self.joints = np.asarray(self.joints, dtype=float)

    def copy(self) -> "Pose3D":
        return Pose3D(self.joints.copy(), self.skeleton_id)


@dataclass
class Pose2D:
    """Joint positions in pixels, shape (n_joints, 2)."""

    joints: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.joints = np.asarray(self.joints, dtype=float)
        if self.valid is not None:
            self.valid = np.asarray(self.valid, dtype=bool)


@dataclass
class RetargetMap:
    """Per-joint affine maps from a source to a target skeleton convention.

    Fitted on root-centered coordinates; ``matrices`` has shape (J, 3, 3) and
    ``offsets`` shape (J, 3).
    """

    matrices: np.ndarray
    offsets: np.ndarray
    source_skeleton: str
    target_skeleton: str
    regularization: float


@dataclass
class ValidationReport:
    ok: bool
    problems: list[str]


def load_skeleton_file(path_or_text, name: str = "custom") -> Skeleton:
    """Parse the key-value skeleton document (see data/default_skeleton.txt)."""
    if hasattr(path_or_text, "read"):
        text = path_or_text.read()
    else:
        text = str(path_or_text)
        if "\n" not in text:
            with open(text, "r", encoding="utf-8") as fh:
                text = fh.read()

    joints: list[str] = []
    edges: list[tuple[str, str]] = []
    sets: dict[str, list[str]] = {}
    root_name = None
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *rest = line.split()
        if key == "joint" and len(rest) == 1:
            joints.append(rest[0])
        elif key == "root" and len(rest) == 1:
            root_name = rest[0]
        elif key == "edge" and len(rest) == 2:
            edges.append((rest[0], rest[1]))
        elif key == "set" and len(rest) >= 2:
            sets[rest[0]] = rest[1:]
        else:
            raise ValueError(f"bad skeleton file line: {raw!r}")
    if root_name is None:
        raise ValueError("skeleton file missing 'root'")
    idx = {n: i for i, n in enumerate(joints)}
    return Skeleton(
        name=name,
        joint_names=tuple(joints),
        edges=tuple((idx[c], idx[p]) for c, p in edges),
        root=idx[root_name],
        joint_sets={lbl: tuple(sorted(idx[n] for n in names)) for lbl, names in sets.items()},
    )


def _load_default() -> Skeleton:
    ref = importlib.resources.files("poselift.data").joinpath("default_skeleton.txt")
    return load_skeleton_file(ref.read_text(encoding="utf-8"), name="default14")


DEFAULT_SKELETON = _load_default()


def validate_skeleton(skeleton: Skeleton) -> ValidationReport:
    """Check tree connectivity, joint count and joint-set coverage."""
    problems: list[str] = []
    n = skeleton.n_joints
    if n != 14:
        problems.append(f"expected 14 joints, got {n}")
    if len(skeleton.edges) != n - 1:
        problems.append(f"not a tree: {len(skeleton.edges)} edges for {n} joints")

    # connectivity + acyclicity via union-find
    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    cyclic = False
    for c, p in skeleton.edges:
        if not (0 <= c < n and 0 <= p < n):
            problems.append(f"edge ({c},{p}) references unknown joint")
            continue
        ra, rb = find(c), find(p)
        if ra == rb:
            cyclic = True
        else:
            parent[ra] = rb
    if cyclic:
        problems.append("not a tree: edges contain a cycle")
    if len({find(i) for i in range(n)}) > 1:
        problems.append("not a tree: edge graph is disconnected")

    if not (0 <= skeleton.root < n):
        problems.append(f"root index {skeleton.root} out of range")

    if "all" not in skeleton.joint_sets:
        problems.append("missing joint set 'all'")
    elif tuple(skeleton.joint_sets["all"]) != tuple(range(n)):
        problems.append("joint set 'all' does not cover all joints")
    for label, members in skeleton.joint_sets.items():
        if len(members) == 0:
            problems.append(f"joint set {label!r} is empty")
        elif any(not (0 <= m < n) for m in members):
            problems.append(f"joint set {label!r} references unknown joint")

    return ValidationReport(ok=not problems, problems=problems)


def _check_pose(pose: Pose3D, skeleton: Skeleton) -> np.ndarray:
    joints = np.asarray(pose.joints, dtype=float)
    if joints.shape != (skeleton.n_joints, 3):
        raise SkeletonError(
            f"pose shape {joints.shape} does not match skeleton with {skeleton.n_joints} joints"
        )
    return joints


def root_center(joints: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    """Translate so the hip midpoint sits at the origin."""
    lh, rh = skeleton.hip_indices()
    mid = 0.5 * (joints[..., lh, :] + joints[..., rh, :])
    return joints - mid[..., None, :]


def limb_lengths(pose: Pose3D, skeleton: Skeleton) -> np.ndarray:
    """Euclidean length of every skeleton edge, in input units (mm)."""
    joints = _check_pose(pose, skeleton)
    child = np.array([c for c, _ in skeleton.edges])
    par = np.array([p for _, p in skeleton.edges])
    return np.linalg.norm(joints[child] - joints[par], axis=-1)


def limb_lengths_batch(joints: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    """Vectorized limb lengths for joints of shape (..., n_joints, 3)."""
    child = np.array([c for c, _ in skeleton.edges])
    par = np.array([p for _, p in skeleton.edges])
    return np.linalg.norm(joints[..., child, :] - joints[..., par, :], axis=-1)


def fit_retarget_map(
    paired_poses: list[tuple[Pose3D, Pose3D]],
    regularization: float = 1e-6,
    skeleton_src: Skeleton = DEFAULT_SKELETON,
    skeleton_tgt: Skeleton = DEFAULT_SKELETON,
) -> RetargetMap:
    """Fit per-joint affine maps (ridge regression) on root-centered pairs."""
    if len(paired_poses) < 4:
        raise ValueError(f"insufficient pairs: need >= 4, got {len(paired_poses)}")
    src = np.stack([root_center(_check_pose(s, skeleton_src), skeleton_src) for s, _ in paired_poses])
    tgt = np.stack([root_center(_check_pose(t, skeleton_tgt), skeleton_tgt) for _, t in paired_poses])

    n_joints = skeleton_tgt.n_joints
    mats = np.zeros((n_joints, 3, 3))
    offs = np.zeros((n_joints, 3))
    for j in range(n_joints):
        a = np.hstack([src[:, j, :], np.ones((len(paired_poses), 1))])  # (N, 4)
        b = tgt[:, j, :]  # (N, 3)
        ata = a.T @ a + regularization * np.eye(4)
        w = np.linalg.solve(ata, a.T @ b)  # (4, 3)
        mats[j] = w[:3].T
        offs[j] = w[3]
    return RetargetMap(mats, offs, skeleton_src.name, skeleton_tgt.name, regularization)


def apply_retarget(
    retarget: RetargetMap, pose: Pose3D, skeleton: Skeleton = DEFAULT_SKELETON
) -> Pose3D:
    """Apply a fitted retarget map to a root-centered copy of ``pose``."""
    if pose.skeleton_id != retarget.source_skeleton:
        raise SkeletonError(
            f"pose skeleton {pose.skeleton_id!r} does not match map source "
            f"{retarget.source_skeleton!r}"
        )
    joints = root_center(_check_pose(pose, skeleton), skeleton)
    out = np.einsum("jab,jb->ja", retarget.matrices, joints) + retarget.offsets
    return Pose3D(out, retarget.target_skeleton)


def deduplicate(
    poses: list[Pose3D], threshold: float = 1.5, skeleton: Skeleton = DEFAULT_SKELETON
) -> list[Pose3D]:
    """Greedy sequential filter dropping near-duplicate poses.

    A pose is dropped iff its average per-joint distance (after root
    centering) to an already retained pose is below ``threshold`` mm.  Input
    order is preserved among survivors, so the filter is deterministic and
    idempotent.
    """
    kept: list[Pose3D] = []
    kept_centered: list[np.ndarray] = []
    for pose in poses:
        centered = root_center(_check_pose(pose, skeleton), skeleton)
        duplicate = False
        if kept_centered:
            stack = np.stack(kept_centered)
            avg = np.linalg.norm(stack - centered, axis=-1).mean(axis=-1)
            duplicate = bool((avg < threshold).any())
        if not duplicate:
            kept.append(pose)
            kept_centered.append(centered)
    return kept
