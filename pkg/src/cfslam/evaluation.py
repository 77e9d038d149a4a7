"""Trajectory and depth evaluation: similarity alignment, ATE-RMSE, absrel, pc110.

Monocular estimates carry an arbitrary scale, so trajectories are aligned to
ground truth with a closed-form least-squares similarity transform before the
RMSE; the recovered scale also rescales estimated depth maps for the depth
metrics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import SE3Pose


class AlignmentError(ValueError):
    """Too few associations or a degenerate (collinear) configuration."""


@dataclass
class Trajectory:
    timestamps: np.ndarray  # (N,), strictly increasing
    poses: list[SE3Pose]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamp/pose count mismatch")
        if len(self.timestamps) > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise ValueError("timestamps must be strictly increasing")

    @staticmethod
    def from_pairs(pairs) -> "Trajectory":
        pairs = list(pairs)
        return Trajectory(np.array([t for t, _ in pairs]), [p for _, p in pairs])

    def positions(self) -> np.ndarray:
        return np.stack([p.t for p in self.poses]) if self.poses else np.zeros((0, 3))

    def __len__(self) -> int:
        return len(self.poses)


@dataclass
class SimilarityAlignment:
    scale: float
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)
    pairs: int
    rmse: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.atleast_2d(points) @ self.rotation.T) + self.translation


@dataclass
class DepthEvalReport:
    absrel: float
    pc110: float  # percent in [0, 100]
    valid_pixel_count: int


def associate_trajectories(
    est: Trajectory, gt: Trajectory, max_dt: float = 0.02
) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp pairing within max_dt, each index used once."""
    candidates = []
    for i, te in enumerate(est.timestamps):
        diffs = np.abs(gt.timestamps - te)
        for j in np.nonzero(diffs < max_dt)[0]:
            candidates.append((diffs[j], i, int(j)))
    candidates.sort()
    used_e: set[int] = set()
    used_g: set[int] = set()
    out = []
    for _, i, j in candidates:
        if i in used_e or j in used_g:
            continue
        used_e.add(i)
        used_g.add(j)
        out.append((i, j))
    out.sort()
    return out


def umeyama_similarity(source: np.ndarray, target: np.ndarray) -> SimilarityAlignment:
    """Least-squares s, R, t minimising ||target - (s R source + t)||^2."""
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    n = len(src)
    if n < 3:
        raise AlignmentError(f"need at least 3 point pairs, got {n}")
    mu_s = src.mean(axis=0)
    mu_t = tgt.mean(axis=0)
    src0 = src - mu_s
    tgt0 = tgt - mu_t
    cov = tgt0.T @ src0 / n
    U, D, Vt = np.linalg.svd(cov)
    if D[1] < 1e-12 * max(D[0], 1e-300):
        raise AlignmentError("degenerate (collinear) point configuration")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = (src0**2).sum() / n
    scale = float(np.trace(np.diag(D) @ S) / var_s)
    t = mu_t - scale * R @ mu_s
    residual = tgt - (scale * (src @ R.T) + t)
    rmse = float(np.sqrt((residual**2).sum(axis=1).mean()))
    return SimilarityAlignment(scale, R, t, n, rmse)


def align_similarity(
    est: Trajectory, gt: Trajectory, max_dt: float = 0.02
) -> SimilarityAlignment:
    """Associate by timestamp and fit the similarity on translations."""
    pairs = associate_trajectories(est, gt, max_dt)
    if len(pairs) < 3:
        raise AlignmentError(f"only {len(pairs)} associations within {max_dt}s")
    src = np.stack([est.poses[i].t for i, _ in pairs])
    tgt = np.stack([gt.poses[j].t for _, j in pairs])
    return umeyama_similarity(src, tgt)


def ate_rmse(est: Trajectory, gt: Trajectory, max_dt: float = 0.02) -> float:
    """RMSE of translation residuals after similarity alignment."""
    return align_similarity(est, gt, max_dt).rmse


def depth_metrics(
    est: np.ndarray,
    gt: np.ndarray,
    scale: float = 1.0,
    symmetric: bool = True,
) -> DepthEvalReport:
    """absrel and pc110 over valid (gt > 0) pixels, est scaled by `scale`.

    pc110 counts depths within 10% of truth: the symmetric ratio criterion
    max(d/d*, d*/d) < 1.1 by default, one-sided |d-d*|/d* < 0.1 otherwise.
    """
    est = np.asarray(est, dtype=np.float64) * scale
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape:
        raise ValueError("depth map shapes differ")
    valid = gt > 0
    count = int(valid.sum())
    if count == 0:
        raise ValueError("no valid ground-truth pixels")
    d = est[valid]
    d_star = gt[valid]
    absrel = float(np.mean(np.abs(d - d_star) / d_star))
    if symmetric:
        with np.errstate(divide="ignore"):
            ratio = np.maximum(d / d_star, d_star / np.maximum(d, 1e-300))
        within = ratio < 1.1
    else:
        within = np.abs(d - d_star) / d_star < 0.1
    return DepthEvalReport(absrel, 100.0 * float(within.mean()), count)
