"""Pipeline, artifact, and CLI tests."""

import json
import os

import numpy as np
import pytest

from cfslam.cli import main as cli_main
from cfslam.decoder import build_synthetic_decoder
from cfslam.evaluation import Trajectory, align_similarity, depth_metrics
from cfslam.geometry import PinholeIntrinsics, SE3Pose
from cfslam.keyframe import make_keyframe
from cfslam.pipeline import (
    RunConfig,
    evaluate_run,
    export_pointcloud,
    run_slam,
    scene_from_spec,
)
from cfslam.tum import read_trajectory_file, write_trajectory_file

TINY_SPEC = {
    "seed": 41,
    "surfaces": [{"kind": "plane", "point": [0, 0, 2.1], "normal": [0.06, -0.04, -1.0]}],
    "trajectory": {
        "kind": "orbit", "target": [0, 0, 2.0], "standoff": 2.0,
        "frames": 10, "span_degrees": 24,
    },
    "noise_sigma": 0.004,
}


def tiny_config(output_dir, **overrides) -> RunConfig:
    base = dict(
        input_kind="synthetic",
        scene_spec=TINY_SPEC,
        output_dir=str(output_dir),
        factors=("pho",),
        photometric_stride=4,
        tracking_levels=(3, 2, 1),
        tracking_iterations=6,
        mapping_iterations=4,
        mapping_levels=(1,),
        final_iterations=6,
        code_size=8,
        seed=0,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def completed_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    report = run_slam(tiny_config(out))
    return out, report


class TestRunSlam:
    def test_artifacts_written(self, completed_run):
        out, report = completed_run
        for name in (
            "trajectory.txt", "keyframes.txt", "groundtruth.txt",
            "config.json", "report.json", "metrics.json", "intrinsics.json",
        ):
            assert (out / name).exists(), name
        assert report["status"] == "ok"
        assert report["stats"]["keyframes"] >= 2
        assert (out / "depth").is_dir() and (out / "depth_gt").is_dir()
        depth_files = list((out / "depth").glob("*.npy"))
        assert len(depth_files) == report["stats"]["keyframes"]

    def test_trajectory_loadable_and_complete(self, completed_run):
        out, report = completed_run
        traj = read_trajectory_file(str(out / "trajectory.txt"))
        assert len(traj) == report["frames"]

    def test_metrics_reasonable(self, completed_run):
        out, report = completed_run
        m = report["metrics"]
        assert m["status"] == "ok"
        assert m["ate_rmse"] < 0.05
        assert m["absrel"] < 0.05
        assert m["pc110"] > 90.0

    def test_metrics_match_direct_eval_calls(self, completed_run):
        out, _ = completed_run
        metrics = json.load(open(out / "metrics.json"))
        est = Trajectory.from_pairs(read_trajectory_file(str(out / "trajectory.txt")))
        gt = Trajectory.from_pairs(read_trajectory_file(str(out / "groundtruth.txt")))
        alignment = align_similarity(est, gt)
        assert metrics["ate_rmse"] == pytest.approx(alignment.rmse, abs=1e-12)
        assert metrics["alignment_scale"] == pytest.approx(alignment.scale, abs=1e-12)
        per = []
        for name in sorted(os.listdir(out / "depth")):
            est_d = np.load(out / "depth" / name)
            gt_d = np.load(out / "depth_gt" / name)
            per.append(depth_metrics(est_d, gt_d, scale=alignment.scale))
        assert metrics["absrel"] == pytest.approx(np.mean([r.absrel for r in per]), abs=1e-12)
        assert metrics["pc110"] == pytest.approx(np.mean([r.pc110 for r in per]), abs=1e-12)

    def test_metrics_json_round_trips(self, completed_run):
        out, _ = completed_run
        m1 = json.load(open(out / "metrics.json"))
        m2 = json.loads(json.dumps(m1))
        assert m1 == m2

    def test_deterministic_outputs(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        run_slam(tiny_config(a))
        run_slam(tiny_config(b))
        assert (a / "trajectory.txt").read_bytes() == (b / "trajectory.txt").read_bytes()
        assert (a / "keyframes.txt").read_bytes() == (b / "keyframes.txt").read_bytes()

    def test_empty_sequence_clean_error(self, tmp_path):
        spec = dict(TINY_SPEC)
        spec["trajectory"] = dict(spec["trajectory"], frames=0)
        with pytest.raises(ValueError):
            run_slam(tiny_config(tmp_path / "e", scene_spec=spec))
        report = json.load(open(tmp_path / "e" / "report.json"))
        assert report["status"] == "input_error"

    def test_report_written_even_on_failure(self, tmp_path):
        cfg = tiny_config(tmp_path / "f", input_kind="tum", scene_spec=None,
                          input_path=str(tmp_path / "missing"))
        with pytest.raises(Exception):
            run_slam(cfg)
        report = json.load(open(tmp_path / "f" / "report.json"))
        assert report["status"] == "input_error"


class TestRunConfig:
    def test_requires_a_factor(self):
        with pytest.raises(ValueError):
            RunConfig(factors=())

    def test_requires_photometric_for_tracking(self):
        with pytest.raises(ValueError):
            RunConfig(factors=("rep",))

    def test_rejects_unknown_keys(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            RunConfig.from_dict({"no_such_option": 1})

    def test_round_trip(self):
        cfg = RunConfig(factors=("pho", "geo"), seed=7)
        again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg


class TestPointcloud:
    def test_plane_keyframe_cloud(self, tmp_path):
        K = PinholeIntrinsics(64.0, 64.0, 64.0, 48.0, 128, 96)
        dec = build_synthetic_decoder(128, 96, 4, d0=2.0)
        image = np.random.default_rng(0).random((96, 128))
        kf = make_keyframe(0, 0.0, image, K, SE3Pose.identity(), dec, levels=3)
        path = tmp_path / "map.ply"
        count = export_pointcloud([kf], str(path), stride=4)
        lines = path.read_text().splitlines()
        header_end = lines.index("end_header")
        declared = int([l for l in lines if l.startswith("element vertex")][0].split()[-1])
        body = lines[header_end + 1:]
        assert declared == count == len(body)
        assert count == (128 // 4) * (96 // 4)
        for line in body[:50]:
            x, y, z, r, g, b = line.split()
            assert float(z) == pytest.approx(2.0, abs=1e-6)  # fronto plane at 2 m
            assert r == g == b

    def test_vertex_positions_in_world_frame(self, tmp_path):
        K = PinholeIntrinsics(64.0, 64.0, 64.0, 48.0, 128, 96)
        dec = build_synthetic_decoder(128, 96, 4, d0=2.0)
        image = np.full((96, 128), 0.5)
        pose = SE3Pose(t=np.array([1.0, -2.0, 0.5]))
        kf = make_keyframe(0, 0.0, image, K, pose, dec, levels=3)
        path = tmp_path / "map.ply"
        export_pointcloud([kf], str(path), stride=16)
        line = path.read_text().splitlines()[-1]
        z = float(line.split()[2])
        assert z == pytest.approx(2.5, abs=1e-6)


class TestEvaluateRun:
    def test_perfect_run_scores_perfectly(self, tmp_path, rng):
        from conftest import random_pose

        out = tmp_path / "perfect"
        (out / "depth").mkdir(parents=True)
        (out / "depth_gt").mkdir()
        traj = [(k * 0.1, random_pose(rng, 1.0, 2.0)) for k in range(12)]
        write_trajectory_file(out / "trajectory.txt", traj)
        write_trajectory_file(out / "keyframes.txt", traj[::3])
        write_trajectory_file(out / "groundtruth.txt", traj)
        for k in range(3):
            d = rng.uniform(0.5, 4.0, (48, 64))
            np.save(out / "depth" / f"kf_{k:06d}.npy", d)
            np.save(out / "depth_gt" / f"kf_{k:06d}.npy", d)
        metrics = evaluate_run(str(out))
        assert metrics["ate_rmse"] == pytest.approx(0.0, abs=1e-9)
        assert metrics["absrel"] == 0.0
        assert metrics["pc110"] == 100.0

    def test_missing_groundtruth_notice(self, tmp_path, rng):
        from conftest import random_pose

        out = tmp_path / "nogt"
        out.mkdir()
        traj = [(k * 0.1, random_pose(rng)) for k in range(5)]
        write_trajectory_file(out / "trajectory.txt", traj)
        metrics = evaluate_run(str(out))
        assert metrics["status"] == "no_groundtruth"
        assert "ate_rmse" not in metrics


class TestCli:
    def test_decoder_info(self, tmp_path, capsys):
        from cfslam.decoder import save_decoder

        path = tmp_path / "d.cfdc"
        save_decoder(build_synthetic_decoder(32, 24, 4), path)
        assert cli_main(["decoder-info", str(path)]) == 0
        info = json.loads(capsys.readouterr().out)
        assert info["width"] == 32 and info["code_size"] == 4

    def test_make_synthetic_and_run_tum(self, tmp_path, capsys):
        spec_path = tmp_path / "scene.json"
        spec_path.write_text(json.dumps(TINY_SPEC))
        data_dir = tmp_path / "dataset"
        assert cli_main(["make-synthetic", "--scene", str(spec_path),
                         "--output", str(data_dir)]) == 0
        assert (data_dir / "rgb.txt").exists()
        out = tmp_path / "run"
        code = cli_main([
            "run", "--tum", str(data_dir), "--output", str(out),
            "--factors", "pho", "--seed", "1",
            "--set", "photometric_stride=4", "--set", "tracking_levels=[3,2,1]",
            "--set", "mapping_iterations=4", "--set", "mapping_levels=[1]",
            "--set", "final_iterations=5", "--set", "code_size=8",
            "--set", "tracking_iterations=6",
        ])
        assert code == 0
        metrics = json.load(open(out / "metrics.json"))
        assert metrics["status"] == "ok"
        assert "ate_rmse" in metrics

    def test_evaluate_and_export_ply(self, completed_run, capsys):
        out, _ = completed_run
        assert cli_main(["evaluate", str(out)]) == 0
        assert cli_main(["export-ply", str(out)]) == 0
        ply = (out / "map.ply").read_text().splitlines()
        declared = int([l for l in ply if l.startswith("element vertex")][0].split()[-1])
        assert declared == len(ply) - ply.index("end_header") - 1

    def test_bad_arguments_error_exit(self, tmp_path):
        assert cli_main(["decoder-info", str(tmp_path / "missing.cfdc")]) == 2

    def test_scene_spec_validation(self):
        with pytest.raises(ValueError, match="unknown surface"):
            scene_from_spec({"surfaces": [{"kind": "torus"}], "trajectory": {}})
