"""Demo 1: database normalization and nearest-neighbor pose retrieval.

Builds a small pose bank, indexes it through the 144 orthographic virtual
cameras, and shows that a 2D query rendered from an arbitrary viewpoint
retrieves the right 3D pose - including when only a subset of joints (one
joint set) is trusted.

Run:  python demos/01_retrieval.py
"""
import numpy as np

from poselift import (
    JOINT_SET_LABELS,
    Pose3D,
    build_index,
    knn_query,
    normalize_pose2d,
    normalize_pose3d,
    pose_error_3d,
    project_orthographic,
)
from poselift.mocap import VirtualCamera
from poselift.scenarios import sample_pose_bank

print(__doc__)

bank = sample_pose_bank(200, seed=7)
index = build_index(bank)
print(f"indexed {index.n_poses} poses x {len(index.cameras)} views "
      f"= {index.n_entries} entries per joint-set tree\n")

# Render pose 42 from a viewpoint that is NOT one of the virtual cameras.
target = 42
view = VirtualCamera(azimuth=37.0, elevation=22.0)
norm3d = normalize_pose3d(Pose3D(bank[target]))
query = normalize_pose2d(project_orthographic(norm3d, view))

print(f"query: pose {target} seen from azimuth {view.azimuth}, "
      f"elevation {view.elevation} (off-grid viewpoint)\n")
print(f"{'set':>4} {'top-1 pose':>10} {'3D error of top-1 (mm)':>24} {'feature dist':>13}")
for label in JOINT_SET_LABELS:
    hits, _ = knn_query(index, query, label, k=5)
    err = pose_error_3d(hits[0].pose, norm3d.joints)
    print(f"{label:>4} {hits[0].pose_id:>10} {err:>24.1f} {hits[0].distance:>13.4f}")

print("\nEvery joint set finds the true pose (or a walk-adjacent frame of the")
print("same sequence) even though the query viewpoint sits between the")
print("virtual cameras - the 2D normalization absorbs scale and translation,")
print("and the 15-degree camera grid is dense enough for the rest.")
