"""Motion-capture database normalization, virtual-camera projection and
k-nearest-neighbor retrieval.

3D poses are normalized (translation and heading removed), rendered through a
bank of orthographic virtual cameras into a dimensionless 2D space where
every pose spans y in [-1, 1], and indexed per joint set in kd-trees.  The
coordinate convention is y-up everywhere: world y is the vertical (gravity)
axis and 2D y grows upward.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .skeleton import (
    DEFAULT_SKELETON,
    JOINT_SET_LABELS,
    Pose2D,
    Pose3D,
    Skeleton,
    root_center,
)

INDEX_MAGIC = b"DSMI"
INDEX_VERSION = 1


class DegeneratePoseError(ValueError):
    """Raised when a pose has no usable extent for normalization."""


@dataclass
class NormalizedPose3D:
    """Root at origin, heading removed, units mm; shape (n_joints, 3)."""

    joints: np.ndarray

    def __post_init__(self) -> None:
        self.joints = np.asarray(self.joints, dtype=float)


@dataclass
class NormalizedPose2D:
    """Dimensionless 2D pose with joint y-coordinates spanning [-1, 1]."""

    joints: np.ndarray

    def __post_init__(self) -> None:
        self.joints = np.asarray(self.joints, dtype=float)


@dataclass(frozen=True)
class VirtualCamera:
    """Orthographic view given by azimuth/elevation in degrees."""

    azimuth: float
    elevation: float

    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; azimuth 0 / elevation 0 is identity."""
        a = np.deg2rad(self.azimuth)
        e = np.deg2rad(self.elevation)
        ry = np.array(
            [[np.cos(a), 0.0, np.sin(a)], [0.0, 1.0, 0.0], [-np.sin(a), 0.0, np.cos(a)]]
        )
        rx = np.array(
            [[1.0, 0.0, 0.0], [0.0, np.cos(e), -np.sin(e)], [0.0, np.sin(e), np.cos(e)]]
        )
        return rx @ ry

    def direction(self) -> np.ndarray:
        """Unit view direction in world coordinates."""
        return self.rotation().T @ np.array([0.0, 0.0, 1.0])


@dataclass
class RetrievedPose:
    """One retrieval hit: normalized 3D source pose plus provenance."""

    pose: np.ndarray  # (n_joints, 3) normalized 3D joints
    pose_id: int
    camera_id: int
    distance: float  # feature-space distance divided by the joint-set size
    rank: int


def virtual_cameras() -> list[VirtualCamera]:
    """The fixed bank of 144 orthographic views: 24 azimuths x 6 elevations.

    Azimuths step 15 degrees over the full circle; elevations step 15 degrees
    from 0 to 75 (the top-down 90-degree view collapses the vertical extent
    and is excluded).
    """
    return [
        VirtualCamera(float(az), float(el))
        for az in range(0, 360, 15)
        for el in range(0, 90, 15)
    ]


def normalize_pose3d(pose: Pose3D, skeleton: Skeleton = DEFAULT_SKELETON) -> NormalizedPose3D:
    """Remove translation and heading (rotation about the vertical axis).

    The hip midpoint is moved to the origin and the pose is rotated about y
    so the left-hip to right-hip direction lies along +x.
    """
    joints = np.asarray(pose.joints, dtype=float)
    return NormalizedPose3D(_normalize3d_batch(joints[None], skeleton)[0])


def _normalize3d_batch(joints: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    """Vectorized normalize_pose3d over (N, n_joints, 3)."""
    centered = root_center(joints, skeleton)
    lh, rh = skeleton.hip_indices()
    d = centered[:, rh, :] - centered[:, lh, :]
    horiz = np.hypot(d[:, 0], d[:, 2])
    if np.any(horiz < 1e-9):
        raise DegeneratePoseError("degenerate heading: hips coincide in the horizontal plane")
    ang = np.arctan2(d[:, 2], d[:, 0])  # rotate by -ang about y puts d along +x
    c, s = np.cos(ang), np.sin(ang)
    x, y, z = centered[..., 0], centered[..., 1], centered[..., 2]
    out = np.empty_like(centered)
    out[..., 0] = c[:, None] * x + s[:, None] * z
    out[..., 1] = y
    out[..., 2] = -s[:, None] * x + c[:, None] * z
    return out


def project_orthographic(pose: NormalizedPose3D, cam: VirtualCamera) -> Pose2D:
    """Rotate into the camera frame and drop the depth coordinate."""
    rotated = np.asarray(pose.joints, dtype=float) @ cam.rotation().T
    return Pose2D(rotated[:, :2])


def normalize_pose2d(pose: Pose2D) -> NormalizedPose2D:
    """Scale/translate so y spans exactly [-1, 1] and x has zero mean."""
    return NormalizedPose2D(_normalize2d_batch(np.asarray(pose.joints, dtype=float)[None])[0])


def _normalize2d_batch(joints: np.ndarray) -> np.ndarray:
    """Vectorized normalize_pose2d over (N, n_joints, 2)."""
    ymin = joints[..., 1].min(axis=-1)
    ymax = joints[..., 1].max(axis=-1)
    extent = ymax - ymin
    if np.any(extent <= 0):
        raise DegeneratePoseError("degenerate pose: zero vertical extent")
    scale = 2.0 / extent
    out = joints * scale[:, None, None]
    out[..., 0] -= out[..., 0].mean(axis=-1)[:, None]
    out[..., 1] -= (out[..., 1].min(axis=-1) + 1.0)[:, None]
    return out


class MoCapIndex:
    """Per-joint-set kd-trees over normalized 2D projections of a pose store.

    Entry ``e`` corresponds to pose ``e // n_cameras`` rendered through
    camera ``e % n_cameras``.  Immutable after construction; queries are
    thread-safe.
    """

    def __init__(
        self,
        skeleton: Skeleton,
        cameras: list[VirtualCamera],
        norm_poses: np.ndarray,
        features: dict[str, np.ndarray],
    ):
        self.skeleton = skeleton
        self.cameras = cameras
        self.norm_poses = np.ascontiguousarray(norm_poses, dtype=np.float32)
        self.features = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in features.items()}
        self._trees = {label: cKDTree(feat) for label, feat in self.features.items()}

    @property
    def n_poses(self) -> int:
        return self.norm_poses.shape[0]

    @property
    def n_entries(self) -> int:
        return self.n_poses * len(self.cameras)

    def entry_links(self, entry_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n_cams = len(self.cameras)
        return entry_ids // n_cams, entry_ids % n_cams

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            _write_index(fh, self)

    @classmethod
    def load(cls, path, skeleton: Skeleton = DEFAULT_SKELETON) -> "MoCapIndex":
        with open(path, "rb") as fh:
            return _read_index(fh, skeleton)


def build_index(
    poses: list[Pose3D] | np.ndarray,
    cameras: list[VirtualCamera] | None = None,
    skeleton: Skeleton = DEFAULT_SKELETON,
) -> MoCapIndex:
    """Normalize, project through every virtual camera and index per joint set."""
    if cameras is None:
        cameras = virtual_cameras()
    if isinstance(poses, np.ndarray):
        joints = np.asarray(poses, dtype=float)
    else:
        joints = np.stack([np.asarray(p.joints, dtype=float) for p in poses]) if poses else np.empty((0,))
    if joints.size == 0:
        raise ValueError("no poses to index")

    norm3d = _normalize3d_batch(joints, skeleton)  # (N, J, 3)
    rots = np.stack([cam.rotation() for cam in cameras])  # (C, 3, 3)
    # (N, C, J, 2): rotate then drop depth
    proj = np.einsum("cab,njb->ncja", rots, norm3d)[..., :2]
    n, c, j, _ = proj.shape
    flat = proj.reshape(n * c, j, 2)  # pose-major entry order

    # per-set normalization: each joint set is scaled by its own vertical
    # extent, so joints outside the set cannot distort its features
    features = {}
    for label in JOINT_SET_LABELS:
        idx = skeleton.set_indices(label)
        sub = _normalize2d_batch(flat[:, idx, :])
        features[label] = sub.reshape(n * c, 2 * len(idx)).astype(np.float32)
    return MoCapIndex(skeleton, list(cameras), norm3d.astype(np.float32), features)


def knn_query(
    index: MoCapIndex, query: NormalizedPose2D, s: str, k: int
) -> tuple[list[RetrievedPose], bool]:
    """Exact K-nearest entries for joint set ``s``, ties broken by entry id.

    The query's set joints are renormalized over the set alone (matching the
    per-set index features), so joints outside the set cannot influence the
    match.  Distance is plain L2 over the concatenated set-joint coordinates;
    the reported value is divided by the joint-set size.  Returns the result
    list and a truncation flag (True when k exceeded the index size).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    idx = index.skeleton.set_indices(s)
    sub = np.asarray(query.joints, dtype=float)[None, idx, :]
    feat = _normalize2d_batch(sub)[0].astype(np.float32).reshape(-1)
    n = index.n_entries
    truncated = k > n
    kk = min(k, n)

    tree = index._trees[s]
    dists, _ = tree.query(feat, k=kk)
    dists = np.atleast_1d(dists)
    dmax = float(dists[-1])
    # re-rank exactly with id tie-break: gather every entry within dmax
    cand = tree.query_ball_point(feat, dmax * (1.0 + 1e-9) + 1e-12)
    cand = np.asarray(sorted(cand), dtype=np.int64)
    d = np.linalg.norm(index.features[s][cand].astype(np.float64) - feat.astype(np.float64), axis=1)
    order = np.lexsort((cand, d))[:kk]
    chosen = cand[order]
    dist = d[order] / len(idx)

    pose_ids, cam_ids = index.entry_links(chosen)
    return (
        [
            RetrievedPose(
                pose=np.asarray(index.norm_poses[p], dtype=float),
                pose_id=int(p),
                camera_id=int(c),
                distance=float(dv),
                rank=r + 1,
            )
            for r, (p, c, dv) in enumerate(zip(pose_ids, cam_ids, dist))
        ],
        truncated,
    )


# --------------------------------------------------------------------------
# pose database ingestion


def load_pose_database(path, skeleton: Skeleton = DEFAULT_SKELETON) -> list[Pose3D]:
    """Read poses from JSON-lines or CSV (auto-detected from the header)."""
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        fh.seek(0)
        if not first.strip():
            return []
        if first.lstrip().startswith("{"):
            return _load_jsonl(fh, skeleton)
        return _load_csv(fh, skeleton)


def _load_jsonl(fh, skeleton: Skeleton) -> list[Pose3D]:
    poses = []
    for lineno, line in enumerate(fh, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            joints = np.asarray(rec["joints_mm"], dtype=float)
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ValueError(f"line {lineno}: malformed pose record: {exc}") from exc
        if joints.shape != (skeleton.n_joints, 3):
            raise ValueError(f"line {lineno}: expected {skeleton.n_joints}x3 joints, got {joints.shape}")
        poses.append(Pose3D(joints, rec.get("skeleton", skeleton.name)))
    return poses


def _load_csv(fh, skeleton: Skeleton) -> list[Pose3D]:
    import csv as _csv

    reader = _csv.reader(fh)
    header = next(reader, None)
    if header is None or header[0] != "id":
        raise ValueError("line 1: CSV header must start with 'id'")
    want = 1 + 3 * skeleton.n_joints
    poses = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != want:
            raise ValueError(f"line {lineno}: expected {want} columns, got {len(row)}")
        vals = np.asarray([float(v) for v in row[1:]], dtype=float)
        poses.append(Pose3D(vals.reshape(skeleton.n_joints, 3), skeleton.name))
    return poses


# --------------------------------------------------------------------------
# binary serialization (magic DSMI, version u16, little-endian)


def _write_index(fh: io.BufferedWriter, index: MoCapIndex) -> None:
    fh.write(INDEX_MAGIC)
    fh.write(struct.pack("<H", INDEX_VERSION))
    fh.write(struct.pack("<IIH", index.n_poses, len(index.cameras), index.skeleton.n_joints))
    cams = np.asarray([(c.azimuth, c.elevation) for c in index.cameras], dtype="<f4")
    fh.write(cams.tobytes())
    fh.write(index.norm_poses.astype("<f4").tobytes())
    fh.write(struct.pack("<H", len(index.features)))
    for label in sorted(index.features):
        feat = index.features[label]
        enc = label.encode("ascii")
        fh.write(struct.pack("<H", len(enc)))
        fh.write(enc)
        fh.write(struct.pack("<II", feat.shape[0], feat.shape[1]))
        fh.write(feat.astype("<f4").tobytes())
        # explicit back-link ids (entry -> pose id), u32
        n_cams = len(index.cameras)
        fh.write((np.arange(feat.shape[0], dtype="<u4") // n_cams).tobytes())


def _read_index(fh, skeleton: Skeleton) -> MoCapIndex:
    magic = fh.read(4)
    if magic != INDEX_MAGIC:
        raise ValueError(f"not a pose index file (magic {magic!r})")
    (version,) = struct.unpack("<H", fh.read(2))
    if version != INDEX_VERSION:
        raise ValueError(f"unsupported index version {version}")
    n_poses, n_cams, n_joints = struct.unpack("<IIH", fh.read(10))
    if n_joints != skeleton.n_joints:
        raise ValueError(f"index joint count {n_joints} does not match skeleton")
    cams = np.frombuffer(fh.read(8 * n_cams), dtype="<f4").reshape(n_cams, 2)
    cameras = [VirtualCamera(float(a), float(e)) for a, e in cams]
    norm_poses = np.frombuffer(fh.read(4 * n_poses * n_joints * 3), dtype="<f4").reshape(
        n_poses, n_joints, 3
    )
    (n_sets,) = struct.unpack("<H", fh.read(2))
    features = {}
    for _ in range(n_sets):
        (llen,) = struct.unpack("<H", fh.read(2))
        label = fh.read(llen).decode("ascii")
        rows, cols = struct.unpack("<II", fh.read(8))
        features[label] = np.frombuffer(fh.read(4 * rows * cols), dtype="<f4").reshape(rows, cols)
        fh.read(4 * rows)  # back-link ids are implied by entry order
    return MoCapIndex(skeleton, cameras, norm_poses, features)
