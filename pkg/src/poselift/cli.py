"""Command-line entry point for reproducible runs.

Subcommands: build-db (ingest + index a pose database), estimate (run the
lifter on unary maps), synth (generate a synthetic scenario bundle), eval
(run experiments or score a result against ground truth) and report
(aggregate existing CSV reports).

Exit codes: 0 ok, 2 input/config error, 3 runtime estimation failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

import numpy as np

from . import scenarios as scen
from .evaluate import pose_error_2d, pose_error_3d
from .lifter import EnergyParams, Intrinsics, ProjectionError, estimate_3d
from .mocap import MoCapIndex, build_index, load_pose_database
from .psm import UnaryMap, synthesize_unaries
from .skeleton import DEFAULT_SKELETON, deduplicate, load_skeleton_file, validate_skeleton

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_RUNTIME = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _atomic_write(path: str, data: bytes | str) -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-poselift-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_skeleton(path: str | None):
    if path is None:
        return DEFAULT_SKELETON
    try:
        return load_skeleton_file(path)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read skeleton file: {exc}")


def _load_params(path: str | None, overrides: argparse.Namespace) -> EnergyParams:
    try:
        params = EnergyParams.load(path) if path else EnergyParams()
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read params file: {exc}")
    for attr in ("iterations", "seed", "mode"):
        val = getattr(overrides, attr, None)
        if val is not None:
            setattr(params, attr, val)
    return params


def cmd_build_db(args) -> int:
    skeleton = _load_skeleton(args.skeleton)
    report = validate_skeleton(skeleton)
    if not report.ok:
        raise CliError("invalid skeleton: " + "; ".join(report.problems))
    try:
        poses = load_pose_database(args.poses, skeleton)
    except OSError as exc:
        raise CliError(f"cannot read pose file: {exc}")
    except ValueError as exc:
        raise CliError(f"malformed pose file: {exc}")
    if not poses:
        raise CliError("no poses in input file")
    kept = deduplicate(poses, args.dedup_mm, skeleton)
    index = build_index(kept, skeleton=skeleton)
    import io

    buf = io.BytesIO()
    from .mocap import _write_index

    _write_index(buf, index)
    _atomic_write(args.out, buf.getvalue())
    print(
        f"indexed {len(kept)} poses ({len(poses) - len(kept)} duplicates dropped), "
        f"{index.n_entries} entries per joint-set tree -> {args.out}"
    )
    return EXIT_OK


def cmd_estimate(args) -> int:
    skeleton = _load_skeleton(args.skeleton)
    try:
        index = MoCapIndex.load(args.index, skeleton)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load index: {exc}")
    try:
        intrinsics = Intrinsics.load(args.intrinsics)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read intrinsics: {exc}")
    params = _load_params(args.params, args)

    if args.unaries:
        try:
            unaries = UnaryMap.load(args.unaries)
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot load unary maps: {exc}")
    else:
        try:
            with open(args.pose2d, "r", encoding="utf-8") as fh:
                rec = json.load(fh)
            joints = np.asarray(rec["joints_px"], dtype=float)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"cannot read 2D pose file: {exc}")
        unaries = synthesize_unaries(
            joints, args.sigma, args.width, args.height, stride=args.stride
        )

    try:
        result = estimate_3d(unaries, index, intrinsics, params)
    except (ProjectionError, ValueError) as exc:
        raise CliError(f"estimation failed: {exc}", EXIT_RUNTIME)
    _atomic_write(args.out, result.to_json() + "\n")
    print(f"estimated 3D pose (set {result.selected_set}) -> {args.out}")
    return EXIT_OK


def _parse_scenarios(path: str) -> list[scen.Scenario]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            spec = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read scenario file: {exc}")
    except json.JSONDecodeError as exc:
        raise CliError(f"corrupt scenario JSON at line {exc.lineno} col {exc.colno}: {exc.msg}")
    try:
        if "count" in spec:
            base = spec.get("base", {})
            return [scen.Scenario(seed=i, **base) for i in range(int(spec["count"]))]
        return [scen.Scenario(**s) for s in spec["scenarios"]]
    except (KeyError, TypeError) as exc:
        raise CliError(f"bad scenario spec: {exc}")


def _parse_sweep(items: list[str]) -> dict[str, list]:
    sweep: dict[str, list] = {}
    for item in items or []:
        if "=" not in item:
            raise CliError(f"bad sweep spec {item!r}, expected key=v1,v2")
        key, vals = item.split("=", 1)
        parsed = []
        for v in vals.split(","):
            try:
                parsed.append(json.loads(v))
            except json.JSONDecodeError:
                parsed.append(v)
        sweep[key] = parsed
    return sweep


def cmd_synth(args) -> int:
    specs = _parse_scenarios(args.scenarios)
    os.makedirs(args.out_dir, exist_ok=True)
    for spec in specs:
        data = scen.generate_scenario(spec)
        stem = os.path.join(args.out_dir, f"scene_{spec.seed:04d}")
        data.unaries.save(stem + "_unaries.bin")
        _atomic_write(
            stem + "_gt.json",
            json.dumps(
                {
                    "pose_3d_mm": data.gt_pose_3d.tolist(),
                    "pose_2d_px": data.gt_pose_2d.tolist(),
                },
                sort_keys=True,
            )
            + "\n",
        )
        db_lines = [
            json.dumps({"id": f"db{i:05d}", "skeleton": "default14", "joints_mm": p.tolist()})
            for i, p in enumerate(data.db_poses)
        ]
        _atomic_write(stem + "_db.jsonl", "\n".join(db_lines) + "\n")
    print(f"wrote {len(specs)} scenario bundles to {args.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.result and args.gt:
        try:
            with open(args.result, "r", encoding="utf-8") as fh:
                res = json.load(fh)
            with open(args.gt, "r", encoding="utf-8") as fh:
                gt = json.load(fh)
            est3 = np.asarray(res["pose_3d_mm"], dtype=float)
            gt3 = np.asarray(gt["pose_3d_mm"], dtype=float)
        except OSError as exc:
            raise CliError(f"cannot read input: {exc}")
        except json.JSONDecodeError as exc:
            raise CliError(f"corrupt JSON at line {exc.lineno} col {exc.colno}: {exc.msg}")
        except (KeyError, ValueError) as exc:
            raise CliError(f"schema mismatch: {exc}")
        out = {"error_3d_mm": pose_error_3d(est3, gt3)}
        if "pose_2d_px" in res and "pose_2d_px" in gt:
            out["error_2d_px"] = pose_error_2d(
                np.asarray(res["pose_2d_px"], dtype=float),
                np.asarray(gt["pose_2d_px"], dtype=float),
            )
        print(json.dumps({k: float(f"{v:.6g}") for k, v in out.items()}, sort_keys=True))
        return EXIT_OK

    if not args.scenarios:
        raise CliError("eval needs either --scenarios or both --result and --gt")
    specs = _parse_scenarios(args.scenarios)
    params = _load_params(args.params, args)
    sweep = _parse_sweep(args.sweep)
    report = scen.run_experiment(specs, params, sweep)
    _atomic_write(args.out_report + ".csv", report.to_csv())
    _atomic_write(args.out_report + "_aggregate.json", json.dumps(report.aggregates, indent=2, sort_keys=True) + "\n")
    _atomic_write(args.out_report + "_curves.tsv", report.curves_tsv())
    print(report.aggregate_csv(), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for path in args.csv:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                header = fh.readline().strip().split(",")
                for line in fh:
                    rows.append(dict(zip(header, line.strip().split(","))))
        except OSError as exc:
            raise CliError(f"cannot read report: {exc}")
    ok = [r for r in rows if r.get("ok") == "True" and r.get("error_3d_mm")]
    if not ok:
        raise CliError("no successful rows in inputs")
    by_cell: dict[str, list[float]] = {}
    for r in ok:
        by_cell.setdefault(r["cell"], []).append(float(r["error_3d_mm"]))
    out_lines = ["cell,n,mean_3d_mm,std_3d_mm"]
    for cell in sorted(by_cell):
        vals = np.array(by_cell[cell])
        out_lines.append(f"{cell},{len(vals)},{vals.mean():.6g},{vals.std():.6g}")
    text = "\n".join(out_lines) + "\n"
    if args.out:
        _atomic_write(args.out, text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poselift", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-db", help="ingest, deduplicate and index a pose database")
    p.add_argument("--poses", required=True, help="JSONL or CSV pose database")
    p.add_argument("--skeleton", help="skeleton definition file (default: built-in 14-joint)")
    p.add_argument("--out", required=True, help="output index file")
    p.add_argument("--dedup-mm", type=float, default=1.5)
    p.set_defaults(func=cmd_build_db)

    p = sub.add_parser("estimate", help="estimate a 3D pose from unary maps or a 2D pose")
    p.add_argument("--index", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--unaries", help="unary score map file")
    group.add_argument("--pose2d", help="JSON with joints_px; unaries are synthesized")
    p.add_argument("--intrinsics", required=True, help="key-value file: fx fy cx cy")
    p.add_argument("--params", help="key-value parameters file")
    p.add_argument("--skeleton")
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["posterior", "energy"])
    p.add_argument("--sigma", type=float, default=3.0, help="unary sigma for --pose2d")
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=480)
    p.add_argument("--stride", type=float, default=4.0)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("synth", help="generate synthetic scenario bundles")
    p.add_argument("--scenarios", required=True, help="scenario spec JSON")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="run experiments or score a result against ground truth")
    p.add_argument("--scenarios", help="scenario spec JSON")
    p.add_argument("--sweep", action="append", help="key=v1,v2 parameter sweep")
    p.add_argument("--params")
    p.add_argument("--result", help="LiftResult JSON to score")
    p.add_argument("--gt", help="ground-truth JSON to score against")
    p.add_argument("--out-report", default="report", help="output path prefix")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--mode", choices=["posterior", "energy"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate existing report CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
