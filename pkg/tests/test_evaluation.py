"""Metric tests against brute-force per-element oracles."""

import numpy as np
import pytest

from cfslam.evaluation import (
    AlignmentError,
    DepthEvalReport,
    Trajectory,
    align_similarity,
    ate_rmse,
    depth_metrics,
    umeyama_similarity,
)
from cfslam.geometry import SE3Pose
from conftest import random_pose


def make_trajectory(rng, n=50, t0=0.0):
    times = t0 + np.arange(n) * 0.1
    poses = [random_pose(rng, max_angle=1.0, max_translation=3.0) for _ in range(n)]
    return Trajectory(times, poses)


def transform_trajectory(traj, scale, R, t):
    poses = []
    for p in traj.poses:
        q = SE3Pose.from_matrix(np.block([[R @ p.rotation_matrix(), np.zeros((3, 1))],
                                          [np.zeros((1, 3)), np.ones((1, 1))]]))
        poses.append(SE3Pose(q.q, scale * (R @ p.t) + t))
    return Trajectory(traj.timestamps.copy(), poses)


def brute_force_ate(est_pos, gt_pos, scale, R, t):
    """Direct per-pair formula for the post-alignment RMSE."""
    errors = []
    for e, g in zip(est_pos, gt_pos):
        aligned = scale * (R @ e) + t
        errors.append(np.sum((aligned - g) ** 2))
    return np.sqrt(np.mean(errors))


class TestAlignment:
    def test_identity_when_equal(self, rng):
        traj = make_trajectory(rng)
        a = align_similarity(traj, traj)
        assert a.scale == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(a.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(a.translation, 0.0, atol=1e-12)
        assert a.rmse < 1e-12

    def test_recovers_half_scale(self, rng):
        gt = make_trajectory(rng)
        est = transform_trajectory(gt, 0.5, np.eye(3), np.zeros(3))
        a = align_similarity(est, gt)
        assert a.scale == pytest.approx(2.0, abs=1e-9)
        assert a.rmse < 1e-9

    def test_construct_then_recover(self, rng):
        for _ in range(20):
            gt = make_trajectory(rng, n=100)
            g = random_pose(rng, max_angle=2.5, max_translation=5.0)
            scale = rng.uniform(0.2, 4.0)
            est = transform_trajectory(gt, scale, g.rotation_matrix(), g.t)
            a = align_similarity(est, gt)
            assert a.rmse < 1e-9
            # the fit inverts the constructed transform
            assert a.scale * scale == pytest.approx(1.0, abs=1e-9)

    def test_too_few_pairs(self, rng):
        traj = make_trajectory(rng, n=2)
        with pytest.raises(AlignmentError):
            align_similarity(traj, traj)

    def test_collinear_degenerate(self):
        times = np.arange(5) * 0.1
        poses = [SE3Pose(t=np.array([float(k), 0.0, 0.0])) for k in range(5)]
        traj = Trajectory(times, poses)
        with pytest.raises(AlignmentError):
            align_similarity(traj, traj)

    def test_association_tolerance(self, rng):
        gt = make_trajectory(rng, n=30)
        est = Trajectory(gt.timestamps + 0.019, list(gt.poses))
        assert ate_rmse(est, gt) < 1e-9
        far = Trajectory(gt.timestamps + 0.357, list(gt.poses))  # off-grid shift
        with pytest.raises(AlignmentError):
            ate_rmse(far, gt)


class TestAte:
    def test_zero_for_identical(self, rng):
        traj = make_trajectory(rng)
        assert ate_rmse(traj, traj) == pytest.approx(0.0, abs=1e-12)

    def test_matches_brute_force_formula(self, rng):
        for _ in range(10):
            gt = make_trajectory(rng, n=40)
            est = Trajectory(
                gt.timestamps.copy(),
                [SE3Pose(p.q, p.t + rng.normal(0, 0.05, 3)) for p in gt.poses],
            )
            a = align_similarity(est, gt)
            direct = brute_force_ate(
                est.positions(), gt.positions(), a.scale, a.rotation, a.translation
            )
            assert ate_rmse(est, gt) == pytest.approx(direct, abs=1e-12)

    def test_invariant_under_similarity_of_estimate(self, rng):
        gt = make_trajectory(rng, n=60)
        est = Trajectory(
            gt.timestamps.copy(),
            [SE3Pose(p.q, p.t + rng.normal(0, 0.1, 3)) for p in gt.poses],
        )
        base = ate_rmse(est, gt)
        for _ in range(20):
            g = random_pose(rng, max_angle=3.0, max_translation=10.0)
            s = rng.uniform(0.1, 5.0)
            moved = transform_trajectory(est, s, g.rotation_matrix(), g.t)
            assert ate_rmse(moved, gt) == pytest.approx(base, abs=1e-9)


class TestDepthMetrics:
    def test_perfect(self, rng):
        gt = rng.uniform(0.5, 5.0, (48, 64))
        report = depth_metrics(gt, gt)
        assert report.absrel == 0.0
        assert report.pc110 == 100.0
        assert report.valid_pixel_count == 48 * 64

    def test_uniform_five_percent(self, rng):
        gt = rng.uniform(0.5, 5.0, (48, 64))
        report = depth_metrics(1.05 * gt, gt)
        assert report.absrel == pytest.approx(0.05, abs=1e-12)
        assert report.pc110 == 100.0

    def test_uniform_twenty_percent(self, rng):
        gt = rng.uniform(0.5, 5.0, (48, 64))
        report = depth_metrics(1.2 * gt, gt)
        assert report.pc110 == 0.0

    def test_matches_brute_force(self, rng):
        gt = rng.uniform(0.5, 5.0, (24, 32))
        gt[rng.random((24, 32)) < 0.1] = 0.0  # invalid holes
        est = gt * rng.uniform(0.8, 1.3, (24, 32))
        scale = 1.07
        report = depth_metrics(est, gt, scale=scale)
        absrel_terms = []
        within = []
        for v in range(24):
            for u in range(32):
                if gt[v, u] <= 0:
                    continue
                d = est[v, u] * scale
                ds = gt[v, u]
                absrel_terms.append(abs(d - ds) / ds)
                within.append(max(d / ds, ds / d) < 1.1)
        assert report.absrel == pytest.approx(np.mean(absrel_terms), abs=1e-12)
        assert report.pc110 == pytest.approx(100.0 * np.mean(within), abs=1e-12)
        assert report.valid_pixel_count == len(absrel_terms)

    def test_pc110_monotone_beyond_threshold(self, rng):
        gt = rng.uniform(0.5, 5.0, (24, 32))
        noisy = gt * rng.uniform(0.95, 1.05, gt.shape)
        values = [
            depth_metrics(noisy * f, gt).pc110 for f in (1.1, 1.2, 1.4, 1.8, 2.5)
        ]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_one_sided_flag(self, rng):
        gt = np.full((8, 8), 2.0)
        est = np.full((8, 8), 2.0 / 1.09)  # within symmetric, outside one-sided? no:
        # |d-d*|/d* = 1 - 1/1.09 = 0.0826 < 0.1, ratio max = 1.09 < 1.1: both pass
        assert depth_metrics(est, gt, symmetric=False).pc110 == 100.0
        est2 = np.full((8, 8), 2.0 * 1.095)
        assert depth_metrics(est2, gt, symmetric=True).pc110 == 100.0
        assert depth_metrics(est2, gt, symmetric=False).pc110 == 100.0
        est3 = np.full((8, 8), 2.0 / 1.15)
        # one-sided: |d-d*|/d* = 0.13 > 0.1 fails; symmetric ratio 1.15 fails too
        assert depth_metrics(est3, gt, symmetric=False).pc110 == 0.0
        assert depth_metrics(est3, gt, symmetric=True).pc110 == 0.0

    def test_no_valid_pixels_raises(self):
        with pytest.raises(ValueError):
            depth_metrics(np.ones((4, 4)), np.zeros((4, 4)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            depth_metrics(np.ones((4, 4)), np.ones((4, 5)))


class TestUmeyamaDirect:
    def test_reflection_guard(self, rng):
        # target is a reflected copy; the recovered rotation must stay proper
        src = rng.normal(size=(50, 3))
        tgt = src.copy()
        tgt[:, 2] *= -1
        a = umeyama_similarity(src, tgt)
        assert np.linalg.det(a.rotation) == pytest.approx(1.0, abs=1e-9)
