"""TUM RGB-D loader and trajectory format tests on the committed fixture."""

import os

import numpy as np
import pytest

from cfslam.geometry import PinholeIntrinsics, SE3Pose
from cfslam.synthetic import Plane, SyntheticScene, generate_sequence, sweep_trajectory
from cfslam.tum import (
    DEFAULT_TUM_INTRINSICS,
    TumFormatError,
    associate_timestamps,
    load_tum_sequence,
    read_trajectory_file,
    working_intrinsics,
    write_trajectory_file,
    write_tum_sequence,
)

FIXTURE = os.path.join(os.path.dirname(__file__), "fixtures", "tum_fr1_snippet")


class TestFixtureLoading:
    def test_loads_all_frames_in_order(self):
        seq = load_tum_sequence(FIXTURE)
        assert len(seq) == 5
        times = [f.timestamp for f in seq.frames]
        assert times == sorted(times)
        assert all(f.depth_path is not None for f in seq.frames)
        assert seq.dropped == 0

    def test_images_resized_to_working_resolution(self):
        seq = load_tum_sequence(FIXTURE)
        img = seq.read_image(0)
        assert img.shape == (192, 256)
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert seq.intrinsics.width == 256 and seq.intrinsics.height == 192

    def test_depth_scale_applied(self):
        seq = load_tum_sequence(FIXTURE)
        depth = seq.read_depth(0)
        assert depth.shape == (192, 256)
        valid = depth[depth > 0]
        assert 1.0 < np.median(valid) < 3.5  # desk-scale meters

    def test_groundtruth_parsed(self):
        seq = load_tum_sequence(FIXTURE)
        assert len(seq.groundtruth) > 10
        ts, pose = seq.groundtruth[0]
        assert ts > 1.3e9
        assert abs(np.linalg.norm(pose.q) - 1.0) < 1e-9

    def test_intrinsics_rescaled(self):
        work = working_intrinsics(DEFAULT_TUM_INTRINSICS, (256, 192))
        assert work.fx == pytest.approx(517.3 * 0.4)
        assert work.cx == pytest.approx(318.6 * 0.4)


class TestAssociation:
    def test_exact_timestamps(self):
        matches = associate_timestamps([0.0, 0.1, 0.2], [0.0, 0.1, 0.2])
        assert matches == [(0, 0), (1, 1), (2, 2)]

    def test_gap_dropped(self, tmp_path):
        # one rgb frame has no depth within 0.02 s
        d = tmp_path / "seq"
        (d / "rgb").mkdir(parents=True)
        import cv2

        for name in ("0.000000", "0.100000", "0.200000"):
            cv2.imwrite(str(d / "rgb" / f"{name}.png"), np.zeros((8, 8), np.uint8))
        (d / "rgb.txt").write_text(
            "# c\n0.000000 rgb/0.000000.png\n0.100000 rgb/0.100000.png\n0.200000 rgb/0.200000.png\n"
        )
        (d / "depth.txt").write_text("# d\n0.001000 depth/a.png\n0.199000 depth/c.png\n")
        seq = load_tum_sequence(str(d), require_depth=True)
        assert len(seq) == 2
        assert seq.dropped == 1

    def test_nearest_wins(self):
        matches = associate_timestamps([0.0], [0.015, 0.004])
        assert matches == [(0, 1)]


class TestTrajectoryFormat:
    def test_identity_line_format(self, tmp_path):
        path = tmp_path / "traj.txt"
        write_trajectory_file(path, [(0.0, SE3Pose.identity())])
        assert path.read_text().strip() == "0.000000000 0 0 0 0 0 0 1"

    def test_round_trip(self, tmp_path, rng):
        from conftest import random_pose

        traj = [(k * 0.1, random_pose(rng, 2.0, 3.0)) for k in range(20)]
        path = tmp_path / "traj.txt"
        write_trajectory_file(path, traj)
        loaded = read_trajectory_file(path)
        assert len(loaded) == 20
        for (t0, p0), (t1, p1) in zip(traj, loaded):
            assert t1 == pytest.approx(t0, abs=1e-9)
            err = p0.inverse().compose(p1)
            assert err.rotation_angle() < 1e-7
            assert np.linalg.norm(err.t) < 1e-7

    def test_groundtruth_rewrite_bit_identical(self, tmp_path):
        # parse the fixture's groundtruth and write it back: byte-identical
        src = os.path.join(FIXTURE, "groundtruth.txt")
        loaded = read_trajectory_file(src)
        out = tmp_path / "gt.txt"
        write_trajectory_file(out, loaded)
        assert out.read_text() == open(src).read()

    def test_malformed_line_raises(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("0.0 1 2 3\n")
        with pytest.raises(TumFormatError):
            read_trajectory_file(str(path))


class TestErrors:
    def test_missing_directory(self, tmp_path):
        with pytest.raises(TumFormatError, match="missing"):
            load_tum_sequence(str(tmp_path / "nope"))

    def test_bad_listing_line(self, tmp_path):
        d = tmp_path / "seq"
        d.mkdir()
        (d / "rgb.txt").write_text("justonefield\n")
        with pytest.raises(TumFormatError):
            load_tum_sequence(str(d))

    def test_empty_listing(self, tmp_path):
        d = tmp_path / "seq"
        d.mkdir()
        (d / "rgb.txt").write_text("# only comments\n")
        with pytest.raises(TumFormatError, match="no frames"):
            load_tum_sequence(str(d))


class TestWriter:
    def test_written_sequence_loads_back(self, tmp_path):
        K = PinholeIntrinsics(64.0, 64.0, 64.0, 48.0, 128, 96)
        scene = SyntheticScene(
            [Plane(np.array([0, 0, 2.0]), np.array([0.05, 0, -1.0]))],
            texture_seed=9,
            trajectory=sweep_trajectory(
                np.array([-0.2, 0, 0]), np.array([0.2, 0, 0]), np.array([0, 0, 2.0]), 6
            ),
        )
        frames = generate_sequence(scene, K, noise_sigma=0.0)
        out = tmp_path / "dataset"
        write_tum_sequence(str(out), frames, K)
        seq = load_tum_sequence(str(out), intrinsics=K, working_size=(128, 96))
        assert len(seq) == 6
        img = seq.read_image(0)
        assert img.shape == (96, 128)
        # 8-bit quantisation bounds the reload error
        assert np.abs(img - frames[0].image).max() < 0.5 / 255 + 1e-9
        depth = seq.read_depth(0)
        assert np.abs(depth - frames[0].depth).max() < 1e-3  # 16-bit @ 0.2mm
        assert len(seq.groundtruth) == 6
