"""End-to-end tests for the command-line interface."""
import json

import numpy as np
import pytest

from poselift.cli import main
from poselift.scenarios import Scenario, generate_scenario, sample_pose_bank


@pytest.fixture(scope="module")
def db_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("db") / "poses.jsonl"
    bank = sample_pose_bank(25, seed=3)
    path.write_text(
        "\n".join(
            json.dumps({"id": f"p{i}", "joints_mm": p.tolist()})
            for i, p in enumerate(bank)
        )
        + "\n"
    )
    return path


@pytest.fixture(scope="module")
def index_file(tmp_path_factory, db_file):
    out = tmp_path_factory.mktemp("idx") / "idx.bin"
    code = main(["build-db", "--poses", str(db_file), "--out", str(out)])
    assert code == 0
    return out


def test_build_db_deterministic(tmp_path, db_file, index_file):
    out2 = tmp_path / "idx2.bin"
    assert main(["build-db", "--poses", str(db_file), "--out", str(out2)]) == 0
    assert index_file.read_bytes() == out2.read_bytes()


def test_build_db_empty_input(tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    code = main(["build-db", "--poses", str(empty), "--out", str(tmp_path / "x.bin")])
    assert code == 2
    assert "no poses" in capsys.readouterr().err


def test_build_db_missing_file(tmp_path):
    code = main(
        ["build-db", "--poses", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "x.bin")]
    )
    assert code == 2


@pytest.fixture(scope="module")
def intrinsics_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("intr") / "intr.txt"
    path.write_text("fx 500\nfy 500\ncx 320\ncy 240\n")
    return path


def test_estimate_from_pose2d(tmp_path, index_file, intrinsics_file):
    scene = generate_scenario(Scenario(seed=0, db_size=25, db_seed=3))
    pose2d = tmp_path / "pose2d.json"
    pose2d.write_text(json.dumps({"joints_px": scene.gt_pose_2d.tolist()}))
    out = tmp_path / "result.json"
    code = main(
        [
            "estimate",
            "--index", str(index_file),
            "--pose2d", str(pose2d),
            "--intrinsics", str(intrinsics_file),
            "--out", str(out),
            "--iterations", "1",
        ]
    )
    assert code == 0
    res = json.loads(out.read_text())
    assert np.asarray(res["pose_3d_mm"]).shape == (14, 3)
    assert len(res["diagnostics"]["iterations"]) == 1


def test_estimate_iteration_count_in_diagnostics(tmp_path, index_file, intrinsics_file):
    scene = generate_scenario(Scenario(seed=1, db_size=25, db_seed=3))
    pose2d = tmp_path / "pose2d.json"
    pose2d.write_text(json.dumps({"joints_px": scene.gt_pose_2d.tolist()}))
    out = tmp_path / "r2.json"
    code = main(
        [
            "estimate",
            "--index", str(index_file),
            "--pose2d", str(pose2d),
            "--intrinsics", str(intrinsics_file),
            "--out", str(out),
            "--iterations", "2",
        ]
    )
    assert code == 0
    assert len(json.loads(out.read_text())["diagnostics"]["iterations"]) == 2


def test_estimate_missing_intrinsics(tmp_path, index_file):
    code = main(
        [
            "estimate",
            "--index", str(index_file),
            "--pose2d", str(tmp_path / "nope.json"),
            "--intrinsics", str(tmp_path / "nope.txt"),
            "--out", str(tmp_path / "out.json"),
        ]
    )
    assert code == 2


def test_eval_score_result_against_itself(tmp_path, capsys):
    pose = sample_pose_bank(1, seed=0)[0]
    a = tmp_path / "a.json"
    a.write_text(json.dumps({"pose_3d_mm": pose.tolist()}))
    code = main(["eval", "--result", str(a), "--gt", str(a)])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out["error_3d_mm"] == pytest.approx(0.0, abs=1e-9)


def test_eval_corrupt_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code = main(["eval", "--result", str(bad), "--gt", str(bad)])
    assert code == 2
    assert "line" in capsys.readouterr().err


def test_eval_scenarios_sweep_and_report(tmp_path, capsys):
    spec = tmp_path / "scen.json"
    spec.write_text(json.dumps({"count": 2, "base": {"db_size": 40}}))
    prefix = str(tmp_path / "rep")
    code = main(
        ["eval", "--scenarios", str(spec), "--sweep", "iterations=1,2", "--out-report", prefix]
    )
    assert code == 0
    csv = (tmp_path / "rep.csv").read_text()
    assert "iterations=1" in csv and "iterations=2" in csv
    # aggregate over the produced CSV
    code = main(["report", str(tmp_path / "rep.csv"), "--out", str(tmp_path / "agg.csv")])
    assert code == 0
    agg = (tmp_path / "agg.csv").read_text()
    assert agg.splitlines()[0] == "cell,n,mean_3d_mm,std_3d_mm"


def test_synth_writes_bundles(tmp_path):
    spec = tmp_path / "scen.json"
    spec.write_text(json.dumps({"scenarios": [{"seed": 0, "db_size": 30}]}))
    out_dir = tmp_path / "bundles"
    assert main(["synth", "--scenarios", str(spec), "--out-dir", str(out_dir)]) == 0
    assert (out_dir / "scene_0000_unaries.bin").exists()
    assert (out_dir / "scene_0000_gt.json").exists()
    assert (out_dir / "scene_0000_db.jsonl").exists()


def test_help_and_unknown_flag():
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--bogus-flag"])
    assert exc.value.code == 2
