"""Shared fixtures and numeric oracles for the test suite."""

import numpy as np
import pytest

from cfslam.decoder import build_synthetic_decoder
from cfslam.geometry import PinholeIntrinsics, SE3Pose, Twist, se3_exp
from cfslam.image import gaussian_blur
from cfslam.keyframe import make_keyframe


def numeric_jacobian(func, x0, step=1e-6):
    """Central-difference Jacobian of a vector function at x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    f0 = np.asarray(func(x0))
    jac = np.zeros((f0.size, x0.size))
    for k in range(x0.size):
        dx = np.zeros_like(x0)
        dx[k] = step
        fp = np.asarray(func(x0 + dx))
        fm = np.asarray(func(x0 - dx))
        jac[:, k] = (fp - fm) / (2 * step)
    return jac


def relative_jacobian_error(analytic, numeric, row_mask=None):
    """Frobenius-relative mismatch, optionally restricted to smooth rows."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if row_mask is not None:
        a = a[row_mask]
        n = n[row_mask]
    denom = max(np.linalg.norm(n), np.linalg.norm(a), 1e-12)
    return np.linalg.norm(a - n) / denom


def interior_rows(pixels, width, height, margin=1e-3):
    """Rows whose sample points sit away from bilinear cell boundaries.

    The interpolant is only piecewise differentiable; finite differences are
    meaningless within `margin` of an integer gridline, so those rows are
    excluded from Jacobian comparisons (the analytic value is the one-sided
    derivative there).
    """
    pix = np.atleast_2d(pixels)
    fu = pix[:, 0] - np.floor(pix[:, 0])
    fv = pix[:, 1] - np.floor(pix[:, 1])
    away = (
        (fu > margin)
        & (fu < 1 - margin)
        & (fv > margin)
        & (fv < 1 - margin)
    )
    inside = (
        (pix[:, 0] > margin)
        & (pix[:, 0] < width - 1 - margin)
        & (pix[:, 1] > margin)
        & (pix[:, 1] < height - 1 - margin)
    )
    return away & inside


def random_pose(rng, max_angle=0.5, max_translation=0.5) -> SE3Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    omega = axis * rng.uniform(0, max_angle)
    v = rng.uniform(-max_translation, max_translation, size=3)
    return se3_exp(Twist(omega, v))


def smooth_random_image(rng, height, width, sigma=2.0):
    """Gaussian-blurred noise rescaled into [0.05, 0.95]."""
    img = gaussian_blur(rng.random((height, width)), sigma)
    lo, hi = img.min(), img.max()
    return 0.05 + 0.9 * (img - lo) / max(hi - lo, 1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


SMALL_K = PinholeIntrinsics(40.0, 40.0, 32.0, 24.0, 64, 48)


def small_test_keyframe(rng, kf_id=0, pose=None, code_size=6, d0=2.0, levels=3):
    """A 64x48 keyframe over a smooth random image with a small decoder."""
    image = smooth_random_image(rng, SMALL_K.height, SMALL_K.width)
    decoder = build_synthetic_decoder(SMALL_K.width, SMALL_K.height, code_size, d0=d0)
    return make_keyframe(
        kf_id, 0.0, image, SMALL_K, pose or SE3Pose.identity(), decoder, levels=levels
    )
