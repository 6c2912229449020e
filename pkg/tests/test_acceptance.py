"""Acceptance suite: the estimator's behavioral contract.

Eleven criteria, one printed pass/fail line each:
  1  retrieval matches a linear-scan oracle exactly
  2  tree inference matches exhaustive enumeration
  3  analytic energy gradients match finite differences
  4  end-to-end accuracy on the clean and noisy synthetic suites
  5  multi-joint-set mode beats forced-all under limb corruption
  6  neighbor weighting reduces error on the noisy suite
  7  energy minimization beats the plain weighted average
  8  a second iteration reduces error with few per-scene regressions
  9  3D metric invariance properties
  10 byte-identical reports for the same root seed
  11 retrieval and end-to-end runtime budgets

The expensive 50-scene suites are computed once in session fixtures and
shared across criteria.  Whole module target: under 10 minutes.
"""
import itertools
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from poselift import (
    DEFAULT_SKELETON,
    EnergyParams,
    JOINT_SET_LABELS,
    Pose2D,
    Pose3D,
    PsmModel,
    UnaryMap,
    build_index,
    estimate_3d,
    fit_binaries,
    infer_map,
    knn_query,
    normalize_pose2d,
    normalize_pose3d,
    pose_error_3d,
    project_orthographic,
    total_energy,
)
from poselift.lifter import CameraModel, Intrinsics, project_pose
from poselift.psm import SCORE_FLOOR
from poselift.scenarios import (
    LIMB_JOINTS,
    Scenario,
    generate_scenario,
    index_for,
    run_experiment,
    sample_pose_bank,
)
from poselift.skeleton import Skeleton
from scipy.spatial.transform import Rotation

N_SCENES = 50

CLEAN_SPEC = dict(db_size=500, include_gt=True, unary_sigma_px=2.0)
NOISY_SPEC = dict(
    db_size=500,
    db_perturb_mm=30.0,
    db_variants=4,
    include_gt=False,
    unary_sigma_px=6.0,
    unary_jitter_px=4.0,
    unary_outlier_joints=1,
    unary_outlier_px=40.0,
)


def _report(criterion: str, ok: bool, detail: str) -> None:
    # bypass pytest capture so each criterion prints exactly one line
    print(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}", file=sys.__stdout__, flush=True)
    assert ok, f"{criterion}: {detail}"


# --------------------------------------------------------------------------
# shared suites


@pytest.fixture(scope="session")
def noisy_suite():
    """Per-scene errors on the noisy suite for the default estimator (2
    iterations), 1-iteration, unweighted, and the plain weighted average."""
    params = EnergyParams()
    out = {"it1": [], "it2": [], "unweighted": [], "average": [], "runtime": []}
    for seed in range(N_SCENES):
        spec = Scenario(seed=seed, **NOISY_SPEC)
        scene = generate_scenario(spec)
        index = index_for(spec)
        t0 = time.perf_counter()
        r2 = estimate_3d(scene.unaries, index, scene.intrinsics, params)
        out["runtime"].append(time.perf_counter() - t0)
        r1 = estimate_3d(scene.unaries, index, scene.intrinsics, params, iterations=1)
        ru = estimate_3d(
            scene.unaries, index, scene.intrinsics, replace(params, weighting=False)
        )
        gt = scene.gt_pose_3d
        out["it2"].append(pose_error_3d(r2.pose_3d, gt))
        out["it1"].append(pose_error_3d(r1.pose_3d, gt))
        out["unweighted"].append(pose_error_3d(ru.pose_3d, gt))
        out["average"].append(
            pose_error_3d(
                np.asarray(r2.diagnostics["weighted_average_pose_3d"]), gt
            )
        )
    return {k: np.asarray(v) for k, v in out.items()}


@pytest.fixture(scope="session")
def clean_suite():
    params = EnergyParams()
    errs = []
    for seed in range(N_SCENES):
        spec = Scenario(seed=seed, **CLEAN_SPEC)
        scene = generate_scenario(spec)
        index = index_for(spec)
        r = estimate_3d(scene.unaries, index, scene.intrinsics, params)
        errs.append(pose_error_3d(r.pose_3d, scene.gt_pose_3d))
    return np.asarray(errs)


# --------------------------------------------------------------------------
# criterion 1: retrieval oracle equivalence


def _oracle_knn(index, query, label, k):
    from poselift.mocap import _normalize2d_batch

    idx = index.skeleton.set_indices(label)
    sub = np.asarray(query.joints, dtype=float)[None, idx, :]
    feat = _normalize2d_batch(sub)[0].astype(np.float32).reshape(-1).astype(np.float64)
    d = np.linalg.norm(index.features[label].astype(np.float64) - feat, axis=1)
    ids = np.arange(index.n_entries)
    order = np.lexsort((ids, d))[: min(k, index.n_entries)]
    return ids[order], d[order] / len(idx)


def test_criterion_1_retrieval_oracle():
    rng = np.random.default_rng(100)
    banks = [sample_pose_bank(n, seed=s) for n, s in ((30, 1), (69, 2), (12, 3))]
    indexes = [build_index(b) for b in banks]  # <= 69*144 = 9936 entries
    mismatches = 0
    for trial in range(200):
        index = indexes[trial % len(indexes)]
        bank = banks[trial % len(banks)]
        pose = normalize_pose3d(Pose3D(bank[rng.integers(len(bank))]))
        cam = index.cameras[rng.integers(len(index.cameras))]
        pts = project_orthographic(pose, cam).joints + rng.normal(0, 20.0, (14, 2))
        query = normalize_pose2d(Pose2D(pts))
        label = JOINT_SET_LABELS[rng.integers(len(JOINT_SET_LABELS))]
        k = int(rng.integers(1, 65))
        hits, _ = knn_query(index, query, label, k)
        got_ids = [h.pose_id * len(index.cameras) + h.camera_id for h in hits]
        got_d = np.asarray([h.distance for h in hits])
        want_ids, want_d = _oracle_knn(index, query, label, k)
        if got_ids != want_ids.tolist() or not np.array_equal(got_d, want_d):
            mismatches += 1
    _report(
        "criterion 1 (retrieval oracle)",
        mismatches == 0,
        f"200 instances, {mismatches} mismatches (ids, order and distances exact)",
    )


# --------------------------------------------------------------------------
# criterion 2: inference oracle equivalence


def _random_psm_instance(rng):
    n = int(rng.integers(2, 5))
    parents = [int(rng.integers(0, j)) for j in range(1, n)]
    sk = Skeleton(
        name=f"rand{n}",
        joint_names=tuple(f"j{i}" for i in range(n)),
        edges=tuple((j + 1, p) for j, p in enumerate(parents)),
        root=0,
        joint_sets={"all": tuple(range(n))},
    )
    grids = rng.uniform(0.01, 1.0, (n, 12, 12)).astype(np.float32)
    um = UnaryMap(grids, stride=4.0)
    offsets = {e: rng.normal(0.0, 15.0, (12, 2)) for e in sk.edges}
    model = PsmModel(sk, fit_binaries(offsets, int(rng.integers(1, 4)), seed=int(rng.integers(1000))))
    candidates = {
        j: rng.uniform(2.0, 42.0, (int(rng.integers(1, 11)), 2)) for j in range(n)
    }
    return model, um, candidates


def _oracle_infer(model, um, candidates):
    sk = model.skeleton
    n = sk.n_joints
    best, best_pick = -np.inf, None
    for pick in itertools.product(*(range(len(candidates[j])) for j in range(n))):
        s = 0.0
        for j in range(n):
            s += np.log(max(float(um.sample(j, candidates[j][pick[j]])), SCORE_FLOOR))
        for child, parent in sk.edges:
            d = candidates[child][pick[child]] - candidates[parent][pick[parent]]
            s += np.log(float(model.binaries[(child, parent)].score(d)))
        if s > best:
            best, best_pick = s, pick
    return best_pick, best


def test_criterion_2_inference_oracle():
    rng = np.random.default_rng(200)
    bad_argmax = 0
    worst_rel = 0.0
    for _ in range(200):
        model, um, candidates = _random_psm_instance(rng)
        pose, score = infer_map(model, um, candidates)
        pick, ref = _oracle_infer(model, um, candidates)
        want = np.stack([candidates[j][pick[j]] for j in range(model.skeleton.n_joints)])
        if not np.array_equal(pose.joints, want):
            bad_argmax += 1
        worst_rel = max(worst_rel, abs(score - ref) / max(abs(ref), 1e-30))
    ok = bad_argmax == 0 and worst_rel <= 1e-9
    _report(
        "criterion 2 (inference oracle)",
        ok,
        f"200 instances, {bad_argmax} argmax mismatches, worst score rel err {worst_rel:.2e}",
    )


# --------------------------------------------------------------------------
# criterion 3: gradient check


def test_criterion_3_gradient_check():
    rng = np.random.default_rng(300)
    intr = Intrinsics(500.0, 500.0, 320.0, 240.0)
    params = EnergyParams()
    worst = 0.0
    for trial in range(100):
        bank = sample_pose_bank(6, seed=int(rng.integers(10_000)))
        retrieved = np.stack([normalize_pose3d(Pose3D(p)).joints for p in bank])
        joints = retrieved[0] + rng.normal(0, 30.0, (14, 3))
        rv = Rotation.from_euler(
            "yx", [rng.uniform(0, 360), rng.uniform(0, 25)], degrees=True
        ).as_rotvec()
        cam = CameraModel(intr, rv, np.array([0.0, 0.0, rng.uniform(3500, 4500)]))
        x2d = project_pose(cam, joints).joints + rng.normal(0, 5.0, (14, 2))
        w = rng.uniform(0.05, 1.0, 6)
        label = JOINT_SET_LABELS[trial % len(JOINT_SET_LABELS)]
        _, grad = total_energy(joints, cam, label, x2d, retrieved, w, params)
        h = 1e-3
        for _ in range(6):  # spot-check random coordinates, central differences
            j, a = int(rng.integers(14)), int(rng.integers(3))
            if abs(grad[j, a]) <= 1e-8:
                continue
            jp = joints.copy()
            jp[j, a] += h
            fp, _ = total_energy(jp, cam, label, x2d, retrieved, w, params)
            jp[j, a] -= 2 * h
            fm, _ = total_energy(jp, cam, label, x2d, retrieved, w, params)
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(fd - grad[j, a]) / max(abs(grad[j, a]), 1e-12))
    _report(
        "criterion 3 (gradient check)",
        worst < 1e-4,
        f"100 instances, worst relative error {worst:.2e} (< 1e-4)",
    )


# --------------------------------------------------------------------------
# criteria 4-8: end-to-end suites


def test_criterion_4_end_to_end(clean_suite, noisy_suite):
    clean = float(clean_suite.mean())
    noisy = float(noisy_suite["it2"].mean())
    ok = clean <= 5.0 and noisy <= 60.0
    _report(
        "criterion 4 (end-to-end accuracy)",
        ok,
        f"clean mean {clean:.2f} mm (<= 5), noisy mean {noisy:.1f} mm (<= 60)",
    )


def test_criterion_5_joint_set_robustness():
    params = EnergyParams()
    limbs = list(LIMB_JOINTS)
    multi, forced = [], []
    for seed in range(N_SCENES):
        spec = Scenario(
            seed=seed,
            corrupt_limb=limbs[seed % 4],
            corrupt_offset_px=50.0,
            **CLEAN_SPEC,
        )
        scene = generate_scenario(spec)
        index = index_for(spec)
        rm = estimate_3d(scene.unaries, index, scene.intrinsics, params)
        rf = estimate_3d(
            scene.unaries, index, scene.intrinsics, replace(params, restrict_set="all")
        )
        multi.append(pose_error_3d(rm.pose_3d, scene.gt_pose_3d))
        forced.append(pose_error_3d(rf.pose_3d, scene.gt_pose_3d))
    m, f = float(np.mean(multi)), float(np.mean(forced))
    _report(
        "criterion 5 (joint-set robustness)",
        m <= 0.9 * f,
        f"multi-set {m:.1f} mm vs forced-all {f:.1f} mm (ratio {m / f:.3f} <= 0.9)",
    )


def test_criterion_6_weighting_trend(noisy_suite):
    weighted = float(noisy_suite["it2"].mean())
    unweighted = float(noisy_suite["unweighted"].mean())
    _report(
        "criterion 6 (weighting trend)",
        weighted <= unweighted,
        f"K_w=64 weighted {weighted:.1f} mm <= unweighted-K {unweighted:.1f} mm",
    )


def test_criterion_7_optimization_vs_average(noisy_suite):
    opt = float(noisy_suite["it2"].mean())
    avg = float(noisy_suite["average"].mean())
    _report(
        "criterion 7 (optimization vs average)",
        opt <= avg,
        f"minimize_energy {opt:.2f} mm <= weighted average {avg:.2f} mm",
    )


def test_criterion_8_iteration_trend(noisy_suite):
    e1 = noisy_suite["it1"]
    e2 = noisy_suite["it2"]
    regress = float((e2 > e1).mean())
    ok = e2.mean() <= e1.mean() and regress <= 0.2
    _report(
        "criterion 8 (iteration trend)",
        ok,
        f"iter2 {e2.mean():.1f} mm <= iter1 {e1.mean():.1f} mm, "
        f"regressions {regress:.0%} (<= 20%)",
    )


# --------------------------------------------------------------------------
# criterion 9: metric invariance


def test_criterion_9_metric_invariance():
    rng = np.random.default_rng(900)
    n = 10_000
    tol = 1e-9
    worst = 0.0
    for _ in range(n):
        a = rng.normal(0.0, 300.0, (14, 3))
        b = a + rng.normal(0.0, 50.0, (14, 3))
        rot = Rotation.from_rotvec(rng.normal(0.0, 1.0, 3)).as_matrix()
        t = rng.normal(0.0, 500.0, 3)
        e_ab = pose_error_3d(a, b)
        worst = max(
            worst,
            pose_error_3d(a, a),  # zero self-error
            abs(pose_error_3d(a @ rot.T + t, b) - e_ab),  # rigid invariance
            abs(pose_error_3d(b, a) - e_ab),  # symmetry
        )
    _report(
        "criterion 9 (metric invariance)",
        worst <= tol,
        f"{n} instances, worst deviation {worst:.2e} mm (<= 1e-9)",
    )


# --------------------------------------------------------------------------
# criterion 10: determinism


def test_criterion_10_determinism():
    specs = [Scenario(seed=s, db_size=80) for s in range(3)]
    sweep = {"iterations": [1, 2]}
    a = run_experiment(specs, EnergyParams(), sweep=sweep)
    b = run_experiment(specs, EnergyParams(), sweep=sweep)
    same = (
        a.to_csv() == b.to_csv()
        and a.aggregate_csv() == b.aggregate_csv()
        and a.curves_tsv() == b.curves_tsv()
    )
    _report(
        "criterion 10 (determinism)",
        same,
        "same-seed benchmark runs produce byte-identical CSV/TSV reports",
    )


# --------------------------------------------------------------------------
# criterion 11: performance sanity


def test_criterion_11_performance(noisy_suite):
    # 695 poses x 144 cameras = 100080 entries
    bank = sample_pose_bank(695, seed=1100)
    index = build_index(bank)
    assert index.n_entries >= 100_000
    rng = np.random.default_rng(1100)
    times = []
    for _ in range(20):
        pose = normalize_pose3d(Pose3D(bank[rng.integers(len(bank))]))
        cam = index.cameras[rng.integers(len(index.cameras))]
        pts = project_orthographic(pose, cam).joints + rng.normal(0, 10.0, (14, 2))
        query = normalize_pose2d(Pose2D(pts))
        t0 = time.perf_counter()
        knn_query(index, query, "all", 256)
        times.append(time.perf_counter() - t0)
    knn_ms = float(np.median(times) * 1000.0)
    scene_s = float(np.median(noisy_suite["runtime"]))
    ok = knn_ms < 50.0 and scene_s < 5.0
    _report(
        "criterion 11 (performance)",
        ok,
        f"knn K=256 on {index.n_entries} entries: median {knn_ms:.1f} ms (< 50); "
        f"estimate_3d median {scene_s:.2f} s/scene (< 5)",
    )
