"""Evaluation metrics: rigid-alignment 3D pose error and 2D pixel error."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class RigidTransform:
    """Proper rigid motion (rotation with det +1, translation)."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)
    scale: float = 1.0

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points, dtype=float) @ self.rotation.T) + self.translation


def rigid_align(est: np.ndarray, gt: np.ndarray, allow_scale: bool = False) -> RigidTransform:
    """Least-squares rotation+translation mapping est onto gt (Procrustes).

    Reflections are excluded by sign-correcting the smallest singular
    direction.  Raises on degenerate (collinear) point sets.
    """
    est = np.asarray(getattr(est, "joints", est), dtype=float)
    gt = np.asarray(getattr(gt, "joints", gt), dtype=float)
    if est.shape != gt.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {gt.shape}")
    mu_e = est.mean(axis=0)
    mu_g = gt.mean(axis=0)
    a = est - mu_e
    b = gt - mu_g
    h = a.T @ b
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-9 * max(s[0], 1.0):
        raise ValueError("degenerate point set: joints are collinear")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    corr = np.diag([1.0, 1.0, d])
    rot = vt.T @ corr @ u.T
    if allow_scale:
        scale = float((s * np.diag(corr)).sum() / (a ** 2).sum())
    else:
        scale = 1.0
    trans = mu_g - scale * rot @ mu_e
    return RigidTransform(rot, trans, scale)


def pose_error_3d(est, gt, allow_scale: bool = False) -> float:
    """Mean per-joint Euclidean distance (mm) after optimal rigid alignment."""
    est = np.asarray(getattr(est, "joints", est), dtype=float)
    gt = np.asarray(getattr(gt, "joints", gt), dtype=float)
    transform = rigid_align(est, gt, allow_scale=allow_scale)
    return float(np.linalg.norm(transform.apply(est) - gt, axis=1).mean())


def pose_error_2d(est, gt) -> float:
    """Mean per-joint Euclidean distance in pixels, no alignment."""
    est = np.asarray(getattr(est, "joints", est), dtype=float)
    gt = np.asarray(getattr(gt, "joints", gt), dtype=float)
    if est.shape != gt.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {gt.shape}")
    return float(np.linalg.norm(est - gt, axis=1).mean())
