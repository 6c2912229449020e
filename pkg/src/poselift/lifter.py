"""3D pose estimation core: camera projection estimation, joint-set
selection, nearest-neighbor weighting, PCA pose subspace and the weighted
three-term energy minimization, iterated to convergence.

The energy E = w_p*E_p + w_r*E_r + w_a*E_a combines a projection term over
the selected joint set, a retrieval term pulling toward the weighted
nearest-neighbor poses and an anthropometric term on limb lengths.  Each
term is a smoothed fourth root, so gradients stay finite at zero residual.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from .mocap import MoCapIndex, NormalizedPose2D, knn_query, normalize_pose2d
from .psm import UnaryMap, refine_pose
from .skeleton import (
    DEFAULT_SKELETON,
    JOINT_SET_LABELS,
    Pose2D,
    Pose3D,
    Skeleton,
    limb_lengths_batch,
    root_center,
)


class ProjectionError(RuntimeError):
    """Camera estimation failed or a joint fell behind the camera."""


@dataclass
class Intrinsics:
    """Fixed pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    @classmethod
    def load(cls, path) -> "Intrinsics":
        vals = _read_keyvalue(path)
        try:
            return cls(float(vals["fx"]), float(vals["fy"]), float(vals["cx"]), float(vals["cy"]))
        except KeyError as exc:
            raise ValueError(f"intrinsics file missing key {exc}") from exc


@dataclass
class CameraModel:
    """Pinhole camera: fixed intrinsics plus estimated rotation/translation.

    Camera frame is x right, y up, z forward (depth); a point p in the
    normalized pose space maps to R p + t and projects to
    (cx + fx*x/z, cy + fy*y/z).
    """

    intrinsics: Intrinsics
    rvec: np.ndarray  # axis-angle, 3 parameters
    tvec: np.ndarray  # mm

    def __post_init__(self) -> None:
        self.rvec = np.asarray(self.rvec, dtype=float)
        self.tvec = np.asarray(self.tvec, dtype=float)

    def rotation(self) -> np.ndarray:
        return Rotation.from_rotvec(self.rvec).as_matrix()

    def to_dict(self) -> dict:
        return {
            "intrinsics": asdict(self.intrinsics),
            "rvec": self.rvec.tolist(),
            "tvec": self.tvec.tolist(),
        }


@dataclass
class EnergyParams:
    """Weights, counts and optimizer settings for the energy minimization."""

    omega_p: float = 0.55
    omega_r: float = 0.35
    omega_a: float = 0.065
    k_retrieval: int = 256
    k_weighted: int = 64
    pca_dim: int = 18
    root_eps: float = 1e-12
    iterations: int = 2
    mode: str = "posterior"  # or "energy"
    refine_components: int = 5
    seed: int = 0
    restarts: int = 4
    max_iterations: int = 200
    # iteration cap for the final subspace descent; a short budget keeps the
    # estimate near the weighted-mean initialization, which regularizes
    # against the concave retrieval term's single-pose attractors
    lift_max_iterations: int = 12
    # fraction of each PCA mode's std the descent may move from the weighted
    # mean (0 disables the bound)
    lift_trust: float = 0.0
    gradient_tol: float = 1e-8
    # posterior margin a new joint set must beat the incumbent by before the
    # selection switches between iterations (prevents selection flapping)
    set_hysteresis: float = 5.0
    # a joint set is only eligible for selection when the best raw image
    # support of its retrieved pool reaches this fraction of the best set's;
    # a corrupted set poisons its own retrieval and camera, which shows up as
    # low support long before the 2D posterior notices
    support_gate: float = 0.75
    # number of top-ranked retrieved poses the camera is fitted on
    camera_fit_poses: int = 8
    # ablation switches: force a single joint set / disable NN weighting
    restrict_set: str | None = None
    weighting: bool = True

    def __post_init__(self) -> None:
        if self.k_retrieval < self.k_weighted or self.k_weighted < 1:
            raise ValueError("require K >= K_w >= 1")
        if min(self.omega_p, self.omega_r, self.omega_a) < 0:
            raise ValueError("energy weights must be >= 0")
        if self.pca_dim < 1:
            raise ValueError("pca_dim must be >= 1")

    @classmethod
    def load(cls, path) -> "EnergyParams":
        vals = _read_keyvalue(path)
        known = {
            "omega_p": float, "omega_r": float, "omega_a": float,
            "K": int, "K_w": int, "pca_dim": int, "iterations": int,
            "seed": int, "restarts": int, "mode": str,
            "root_eps": float, "max_iterations": int, "gradient_tol": float,
            "refine_components": int,
        }
        rename = {"K": "k_retrieval", "K_w": "k_weighted"}
        kwargs = {}
        for key, val in vals.items():
            if key not in known:
                raise ValueError(f"unknown parameter key {key!r}")
            kwargs[rename.get(key, key)] = known[key](val)
        return cls(**kwargs)


def _read_keyvalue(path) -> dict[str, str]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace("=", " ").split()
            if len(parts) != 2:
                raise ValueError(f"bad key-value line: {raw!r}")
            out[parts[0]] = parts[1]
    return out


@dataclass
class PoseSubspace:
    """Weighted-PCA subspace of root-centered 3D poses (flattened)."""

    mean: np.ndarray  # (3*n_joints,)
    basis: np.ndarray  # (dim, 3*n_joints), orthonormal rows
    variances: np.ndarray  # (dim,), non-increasing

    @property
    def dim(self) -> int:
        return self.basis.shape[0]


@dataclass
class LiftResult:
    """Output of estimate_3d: 3D pose, refined 2D pose and diagnostics."""

    pose_3d: np.ndarray  # (n_joints, 3) mm, camera frame
    pose_2d: np.ndarray  # (n_joints, 2) px
    selected_set: str
    camera: CameraModel
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "pose_3d_mm": self.pose_3d.tolist(),
            "pose_2d_px": self.pose_2d.tolist(),
            "selected_set": self.selected_set,
            "camera": self.camera.to_dict(),
            "diagnostics": self.diagnostics,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# projection


def _project_points(joints: np.ndarray, rot: np.ndarray, tvec: np.ndarray, intr: Intrinsics):
    """Project (..., n_joints, 3) points; returns (projections, depths)."""
    p = joints @ rot.T + tvec
    z = p[..., 2]
    uv = np.empty(p.shape[:-1] + (2,))
    uv[..., 0] = intr.cx + intr.fx * p[..., 0] / z
    uv[..., 1] = intr.cy + intr.fy * p[..., 1] / z
    return uv, z


def project_pose(cam: CameraModel, pose: Pose3D | np.ndarray) -> Pose2D:
    """Perspective projection of every joint; errors on non-positive depth."""
    joints = np.asarray(getattr(pose, "joints", pose), dtype=float)
    uv, z = _project_points(joints, cam.rotation(), cam.tvec, cam.intrinsics)
    if np.any(z <= 0):
        raise ProjectionError("behind camera: joint with non-positive depth")
    return Pose2D(uv)


# --------------------------------------------------------------------------
# energy terms (values and analytic gradients w.r.t. the 3D pose)


MM_TO_M = 1e-2  # pose coordinates are millimeters; energies use meters


def _smoothed_root(s: np.ndarray | float, eps: float):
    """f = (s + eps)^(1/4) and df/ds."""
    base = np.asarray(s, dtype=float) + eps
    val = base ** 0.25
    return val, 0.25 * base ** (-0.75)


def energy_p(
    joints: np.ndarray,
    cam: CameraModel,
    set_indices: np.ndarray,
    x2d: np.ndarray,
    eps: float = 1e-12,
) -> tuple[float, np.ndarray]:
    """Projection term over the joint set; returns (value, grad wrt joints)."""
    rot = cam.rotation()
    sub = joints[set_indices]
    uv, z = _project_points(sub, rot, cam.tvec, cam.intrinsics)
    if np.any(z <= 0):
        raise ProjectionError("behind camera: joint with non-positive depth")
    r = uv - np.asarray(x2d, dtype=float)[set_indices]
    s = float((r ** 2).sum())
    val, dval = _smoothed_root(s, eps)

    # d(proj)/d(camera point), chained through the rotation
    p = sub @ rot.T + cam.tvec
    fx, fy = cam.intrinsics.fx, cam.intrinsics.fy
    jac = np.zeros((len(set_indices), 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * p[:, 0] / z ** 2
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * p[:, 1] / z ** 2
    dsub = 2.0 * np.einsum("ia,iab,bc->ic", r, jac, rot)
    grad = np.zeros_like(joints)
    grad[set_indices] = float(dval) * dsub
    return float(val), grad


def energy_r(
    joints: np.ndarray,
    retrieved: np.ndarray,
    weights: np.ndarray,
    eps: float = 1e-12,
) -> tuple[float, np.ndarray]:
    """Retrieval term: weighted smoothed-root distances to the K poses.

    The inner sum runs over all joints regardless of the selected set.
    Distances are taken in meters so the term is commensurate with the
    pixel-domain projection term.
    """
    diff = (joints[None] - retrieved) * MM_TO_M  # (K, J, 3)
    s = (diff ** 2).sum(axis=(1, 2))
    val, dval = _smoothed_root(s, eps)
    w = np.asarray(weights, dtype=float)
    grad = np.einsum("k,kja->ja", w * dval * 2.0 * MM_TO_M, diff)
    return float((w * val).sum()), grad


def energy_a(
    joints: np.ndarray,
    retrieved: np.ndarray,
    weights: np.ndarray,
    skeleton: Skeleton = DEFAULT_SKELETON,
    eps: float = 1e-12,
) -> tuple[float, np.ndarray]:
    """Anthropometric term comparing limb lengths (in meters) to the
    retrieved poses."""
    child = np.array([c for c, _ in skeleton.edges])
    par = np.array([p for _, p in skeleton.edges])
    vecs = joints[child] - joints[par]  # (E, 3)
    lengths = np.linalg.norm(vecs, axis=1)
    ret_lengths = limb_lengths_batch(retrieved, skeleton)  # (K, E)
    d = (lengths[None] - ret_lengths) * MM_TO_M  # (K, E)
    s = (d ** 2).sum(axis=1)
    val, dval = _smoothed_root(s, eps)
    w = np.asarray(weights, dtype=float)

    units = vecs / np.maximum(lengths, 1e-12)[:, None]  # (E, 3)
    per_edge = ((w * dval)[:, None] * 2.0 * MM_TO_M * d).sum(axis=0)  # (E,)
    grad = np.zeros_like(joints)
    np.add.at(grad, child, per_edge[:, None] * units)
    np.add.at(grad, par, -per_edge[:, None] * units)
    return float((w * val).sum()), grad


def total_energy(
    joints: np.ndarray,
    cam: CameraModel,
    set_label: str,
    x2d: np.ndarray,
    retrieved: np.ndarray,
    weights: np.ndarray,
    params: EnergyParams,
    skeleton: Skeleton = DEFAULT_SKELETON,
) -> tuple[float, np.ndarray]:
    """Weighted sum of the three terms; returns (value, grad wrt joints)."""
    set_indices = skeleton.set_indices(set_label)
    ep, gp = energy_p(joints, cam, set_indices, x2d, params.root_eps)
    er, gr = energy_r(joints, retrieved, weights, params.root_eps)
    ea, ga = energy_a(joints, retrieved, weights, skeleton, params.root_eps)
    val = params.omega_p * ep + params.omega_r * er + params.omega_a * ea
    grad = params.omega_p * gp + params.omega_r * gr + params.omega_a * ga
    return val, grad


# --------------------------------------------------------------------------
# camera estimation


def _camera_objective(x, poses_sub, x2d_sub, mult, intr, eps):
    rot = Rotation.from_rotvec(x[:3]).as_matrix()
    tvec = x[3:] * 1000.0
    uv, z = _project_points(poses_sub, rot, tvec, intr)
    if np.any(z <= 1.0):
        return 1e9 * (1.0 + float(np.maximum(1.0 - z, 0.0).sum()))
    sse = ((uv - x2d_sub[None]) ** 2).sum(axis=(1, 2))
    return float((mult * (sse + eps) ** 0.25).sum())


def estimate_projection(
    retrieved: np.ndarray,
    x2d: np.ndarray,
    set_label: str,
    intrinsics: Intrinsics,
    params: EnergyParams | None = None,
    skeleton: Skeleton = DEFAULT_SKELETON,
    warm_start: CameraModel | None = None,
    rotation_hints: list[np.ndarray] | None = None,
) -> CameraModel:
    """Estimate camera rotation/translation from retrieved poses and a 2D pose.

    Minimizes the summed projection term of all retrieved poses over the
    joint set with a quasi-Newton line-search optimizer, multi-started over
    four azimuth initializations (plus the warm start and any caller-supplied
    rotation hints, e.g. the view of the best retrieval hit).  The depth is
    initialized from similar triangles on the vertical extents.
    """
    params = params or EnergyParams()
    idx = skeleton.set_indices(set_label)
    x2d = np.asarray(x2d, dtype=float)
    x2d_sub = x2d[idx]
    # identical 3D poses retrieved through different virtual cameras add the
    # same term; collapse them to unique poses with multiplicities
    poses_sub, mult = np.unique(
        np.asarray(retrieved, dtype=float)[:, idx, :], axis=0, return_counts=True
    )

    height3d = float(np.ptp(np.asarray(retrieved, dtype=float)[:, :, 1].mean(axis=0)))
    height2d = float(np.ptp(x2d[:, 1]))
    depth0 = intrinsics.fy * max(height3d, 1.0) / max(height2d, 1.0)
    mean_uv = x2d_sub.mean(axis=0)
    tx0 = (mean_uv[0] - intrinsics.cx) * depth0 / intrinsics.fx
    ty0 = (mean_uv[1] - intrinsics.cy) * depth0 / intrinsics.fy

    starts = []
    if warm_start is not None:
        starts.append(np.concatenate([warm_start.rvec, warm_start.tvec / 1000.0]))
    azimuths = [0.0, 90.0, 180.0, 270.0][: max(params.restarts, 1)]
    for az in azimuths:
        rv = Rotation.from_euler("y", az, degrees=True).as_rotvec()
        starts.append(np.concatenate([rv, np.array([tx0, ty0, depth0]) / 1000.0]))
    for rv in rotation_hints or []:
        starts.append(np.concatenate([np.asarray(rv, dtype=float), np.array([tx0, ty0, depth0]) / 1000.0]))

    best = None
    for x0 in starts:
        res = minimize(
            _camera_objective,
            x0,
            args=(poses_sub, x2d_sub, mult, intrinsics, params.root_eps),
            method="L-BFGS-B",
            options={"maxiter": params.max_iterations, "ftol": 1e-12, "gtol": params.gradient_tol},
        )
        if np.isfinite(res.fun) and res.fun < 1e8 and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise ProjectionError("projection estimation failed: no restart converged")
    return CameraModel(intrinsics, best.x[:3].copy(), best.x[3:] * 1000.0)


# --------------------------------------------------------------------------
# weighting, joint-set selection, PCA, final minimization


def compute_weights(unaries: UnaryMap, projected: np.ndarray, k_weighted: int) -> np.ndarray:
    """Image-consistency weights for K projected poses.

    Raw weight is the summed unary score of a projected pose; the top
    ``k_weighted`` poses are kept and min-max normalized to [0, 1], the rest
    get weight zero.  When every kept raw weight is equal they all map to 1.
    """
    projected = np.asarray(projected, dtype=float)
    raw = unaries.sample_pose(projected)
    k = len(raw)
    keep = np.argsort(-raw, kind="stable")[: min(k_weighted, k)]
    kept = raw[keep]
    span = kept.max() - kept.min()
    weights = np.zeros(k)
    if span <= 0:
        weights[keep] = 1.0
    else:
        weights[keep] = (kept - kept.min()) / span
    return weights


def select_joint_set_energy(
    retrieved: dict[str, np.ndarray],
    cameras: dict[str, CameraModel],
    x2d: np.ndarray,
    weights: dict[str, np.ndarray],
    params: EnergyParams,
    skeleton: Skeleton = DEFAULT_SKELETON,
) -> tuple[str, dict[str, float]]:
    """Pick the joint set minimizing the summed energy of its retrieved poses."""
    eps = params.root_eps
    totals: dict[str, float] = {}
    for label in JOINT_SET_LABELS:
        if label not in retrieved:
            continue
        poses = np.asarray(retrieved[label], dtype=float)  # (K, J, 3)
        w = np.asarray(weights[label], dtype=float)
        cam = cameras[label]
        idx = skeleton.set_indices(label)
        uv, z = _project_points(poses[:, idx, :], cam.rotation(), cam.tvec, cam.intrinsics)
        sse = ((uv - x2d[idx][None]) ** 2).sum(axis=(1, 2))
        ep = (sse + eps) ** 0.25  # (K,)

        flat = poses.reshape(len(poses), -1)
        d2 = ((flat[:, None, :] - flat[None, :, :]) ** 2).sum(axis=2)
        er = ((d2 + eps) ** 0.25 @ w)  # (K,)

        lengths = limb_lengths_batch(poses, skeleton)
        ld2 = ((lengths[:, None, :] - lengths[None, :, :]) ** 2).sum(axis=2)
        ea = ((ld2 + eps) ** 0.25 @ w)
        totals[label] = float(
            (params.omega_p * ep + params.omega_r * er + params.omega_a * ea).sum()
        )
    best = min(
        (lbl for lbl in JOINT_SET_LABELS if lbl in totals),
        key=lambda lbl: (totals[lbl], JOINT_SET_LABELS.index(lbl)),
    )
    return best, totals


def fit_pca(
    retrieved: np.ndarray,
    weights: np.ndarray,
    pca_dim: int,
    skeleton: Skeleton = DEFAULT_SKELETON,
) -> PoseSubspace:
    """Weighted PCA of root-centered flattened poses.

    The dimension is capped at one less than the number of positive-weight
    poses; with fewer than two positive weights the subspace degenerates to
    the mean alone.
    """
    poses = root_center(np.asarray(retrieved, dtype=float), skeleton)
    flat = poses.reshape(len(poses), -1)
    w = np.asarray(weights, dtype=float)
    pos = w > 0
    if pos.sum() < 2:
        mean = flat[pos].mean(axis=0) if pos.any() else flat.mean(axis=0)
        return PoseSubspace(mean, np.empty((0, flat.shape[1])), np.empty(0))
    w = w[pos]
    flat = flat[pos]
    mean = (w[:, None] * flat).sum(axis=0) / w.sum()
    dev = flat - mean
    cov = (w[:, None] * dev).T @ dev / w.sum()
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals)
    dim = min(pca_dim, int(pos.sum()) - 1)
    order = order[:dim]
    return PoseSubspace(mean, evecs[:, order].T, np.maximum(evals[order], 0.0))


def minimize_energy(
    subspace: PoseSubspace,
    cam: CameraModel,
    set_label: str,
    x2d: np.ndarray,
    retrieved: np.ndarray,
    weights: np.ndarray,
    params: EnergyParams,
    skeleton: Skeleton = DEFAULT_SKELETON,
) -> np.ndarray:
    """Minimize the total energy over PCA coefficients; returns (J, 3) joints.

    Starts at the weighted-mean pose (zero coefficients) and never returns a
    pose with higher energy than the initialization.
    """
    n_joints = skeleton.n_joints
    mean = subspace.mean

    def unpack(z):
        return (mean + z @ subspace.basis).reshape(n_joints, 3)

    rot = cam.rotation()

    def fun(z):
        joints = unpack(z)
        depth = joints @ rot[2] + cam.tvec[2]
        if np.any(depth <= 1.0):
            # steer the line search back in front of the camera
            viol = np.maximum(1.0 - depth, 0.0)
            grad = np.where(viol > 0, -1.0, 0.0)[:, None] * rot[2]
            return 1e9 * (1.0 + viol.sum()), 1e9 * (subspace.basis @ grad.reshape(-1))
        val, grad = total_energy(
            joints, cam, set_label, x2d, retrieved, weights, params, skeleton
        )
        return val, subspace.basis @ grad.reshape(-1)

    z0 = np.zeros(subspace.dim)
    f0, _ = fun(z0)
    if not np.isfinite(f0):
        raise ValueError("non-finite energy at initialization")
    if subspace.dim == 0:
        return unpack(z0)
    bounds = None
    if params.lift_trust > 0:
        # trust region: stay within a fraction of each mode's spread so the
        # estimate cannot wander far from the weighted-mean initialization
        radius = params.lift_trust * np.sqrt(np.maximum(subspace.variances, 0.0))
        bounds = list(zip(-radius, radius))
    res = minimize(
        fun,
        z0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": params.lift_max_iterations, "gtol": params.gradient_tol, "ftol": 1e-14},
    )
    if np.isfinite(res.fun) and res.fun <= f0:
        return unpack(res.x)
    return unpack(z0)


# --------------------------------------------------------------------------
# full pipeline


def estimate_3d(
    unaries: UnaryMap,
    index: MoCapIndex,
    intrinsics: Intrinsics,
    params: EnergyParams | None = None,
    iterations: int | None = None,
    skeleton: Skeleton | None = None,
) -> LiftResult:
    """Estimate a 3D pose from unary score maps and a mocap index.

    Each iteration: normalize the current 2D pose, retrieve K neighbors per
    joint set, estimate a per-set camera (warm-started after the first
    iteration), project the candidates, weight them by image consistency and
    select the joint set (refining the 2D pose in posterior mode).  The
    final energy minimization runs once after the last iteration.
    """
    params = params or EnergyParams()
    skeleton = skeleton or index.skeleton
    iterations = params.iterations if iterations is None else iterations
    if iterations < 1:
        raise ValueError("iterations must be >= 1")

    x2d = unaries.argmax_locations()
    cams: dict[str, CameraModel] = {}
    sel_label = params.restrict_set or "all"
    labels = [params.restrict_set] if params.restrict_set else list(JOINT_SET_LABELS)
    per_iteration = []
    snapshots: list[tuple[float, str, np.ndarray, dict]] = []
    last: dict[str, dict] = {}

    for it in range(iterations):
        xq = normalize_pose2d(Pose2D(x2d))
        last = {}
        for label in labels:
            try:
                hits, _ = knn_query(index, xq, label, params.k_retrieval)
                poses = np.stack([h.pose for h in hits])
                # the best hit's virtual view is a strong orientation prior
                hint_cam = index.cameras[hits[0].camera_id]
                hints = [Rotation.from_matrix(hint_cam.rotation()).as_rotvec()]
                # fit the camera on the best-matching retrieved poses only:
                # the far tail of the K neighbors would otherwise drag the
                # consensus orientation away from the query's viewpoint
                cam = estimate_projection(
                    poses[: params.camera_fit_poses], x2d, label, intrinsics,
                    params, skeleton,
                    warm_start=cams.get(label), rotation_hints=hints,
                )
                uv, z = _project_points(poses, cam.rotation(), cam.tvec, cam.intrinsics)
                uv[z <= 0] = -1e9  # behind-camera joints score zero
                if params.weighting:
                    w = compute_weights(unaries, uv, params.k_weighted)
                else:
                    w = np.ones(len(poses))
                support = float(unaries.sample_pose(uv).max())
                last[label] = {
                    "poses": poses, "camera": cam, "projected": uv,
                    "weights": w, "support": support,
                }
                cams[label] = cam
            except (ProjectionError, ValueError):
                continue
        if not last:
            raise ProjectionError("all joint sets failed camera estimation")

        if params.mode == "posterior":
            # a set whose pool cannot explain the image (low raw support) has
            # poisoned retrieval or a bad camera; keep it out of the running
            best_support = max(rec["support"] for rec in last.values())
            eligible = {
                label: rec
                for label, rec in last.items()
                if rec["support"] >= params.support_gate * best_support
            }
            # cap the refinement candidates at the K_w best-weighted poses
            kept = {}
            for label, rec in eligible.items():
                order = np.argsort(-rec["weights"], kind="stable")[: params.k_weighted]
                kept[label] = rec["projected"][np.sort(order)]
            x_ref, sel_label, scores = refine_pose(
                unaries, kept, params.refine_components, params.seed, skeleton,
                prefer=sel_label if it > 0 else None,
                prefer_margin=params.set_hysteresis,
            )
            x2d = x_ref.joints
        else:
            sel_label, scores = select_joint_set_energy(
                {l: r["poses"] for l, r in last.items()},
                {l: r["camera"] for l, r in last.items()},
                x2d,
                {l: r["weights"] for l, r in last.items()},
                params,
                skeleton,
            )
        per_iteration.append(
            {
                "selected_set": sel_label,
                "set_scores": {k: float(v) for k, v in scores.items()},
                "pose_2d": x2d.tolist(),
            }
        )
        quality = float(scores[sel_label])
        if params.mode != "posterior":
            quality = -quality  # energy-mode scores are lower-is-better
        snapshots.append((quality, sel_label, x2d, last))

    # keep the iteration whose selected set fit the image best: a further
    # iteration is only accepted when re-retrieval from the refined 2D pose
    # actually improved the posterior, otherwise it is rolled back
    best_it = max(range(len(snapshots)), key=lambda i: (snapshots[i][0], i))
    _, sel_label, x2d, last = snapshots[best_it]
    rec = last[sel_label]
    poses, w, cam = rec["poses"], rec["weights"], rec["camera"]
    subspace = fit_pca(poses, w, params.pca_dim, skeleton)
    joints_norm = minimize_energy(
        subspace, cam, sel_label, x2d, poses, w, params, skeleton
    )
    energy, _ = total_energy(joints_norm, cam, sel_label, x2d, poses, w, params, skeleton)

    # plain weighted average of the kept neighbors, as a reference estimate
    avg_pose = (w[:, None, None] * poses).sum(axis=0) / w.sum()

    rot = cam.rotation()
    diag = {
        "iterations": per_iteration,
        "final_energy": float(energy),
        "weights": w.tolist(),
        "weighted_average_pose_3d": (avg_pose @ rot.T + cam.tvec).tolist(),
        "pose_3d_normalized": joints_norm.tolist(),
    }
    return LiftResult(
        pose_3d=joints_norm @ rot.T + cam.tvec,
        pose_2d=x2d,
        selected_set=sel_label,
        camera=cam,
        diagnostics=diag,
    )
