"""Demo 2: joint-set robustness when one limb's detector output is garbage.

Corrupts the unary maps of one arm by 50 px and compares the full pipeline
in its default multi-set mode against a mode forced to always use all 14
joints.  The multi-set mode can retrieve with a joint set that excludes the
corrupted limb, then reconstruct it from the retrieved 3D poses.

Run:  python demos/02_joint_sets.py   (about a minute)
"""
import numpy as np

from poselift import EnergyParams, estimate_3d, pose_error_3d
from poselift.scenarios import Scenario, generate_scenario, index_for

print(__doc__)

multi_errs, forced_errs = [], []
for seed in range(8):
    spec = Scenario(
        seed=seed,
        db_size=500,
        include_gt=True,
        unary_sigma_px=2.0,
        corrupt_limb=("left_arm", "right_arm", "left_leg", "right_leg")[seed % 4],
        corrupt_offset_px=50.0,
    )
    scene = generate_scenario(spec)
    index = index_for(spec)
    multi = estimate_3d(scene.unaries, index, scene.intrinsics, EnergyParams())
    forced = estimate_3d(
        scene.unaries, index, scene.intrinsics, EnergyParams(restrict_set="all")
    )
    em = pose_error_3d(multi.pose_3d, scene.gt_pose_3d)
    ef = pose_error_3d(forced.pose_3d, scene.gt_pose_3d)
    multi_errs.append(em)
    forced_errs.append(ef)
    print(
        f"scene {seed}: corrupted {spec.corrupt_limb:<9}  "
        f"multi-set picked {multi.selected_set!r:>5} -> {em:6.1f} mm   "
        f"forced-all -> {ef:6.1f} mm"
    )

print(
    f"\nmean over {len(multi_errs)} scenes: multi-set "
    f"{np.mean(multi_errs):.1f} mm vs forced-all {np.mean(forced_errs):.1f} mm"
)
print("The selector usually walks away from the corrupted limb: retrieval")
print("runs on the clean joints and the 3D prior fills the bad limb back in.")
