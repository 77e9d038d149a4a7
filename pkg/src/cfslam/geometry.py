"""SE(3) pose math, pinhole camera model, and the depth-induced pixel warp.

Conventions used throughout the package:
  - World poses are camera-to-world transforms: X_w = R * X_c + t.
  - The relative transform T_ji maps points from frame i to frame j,
    so T_ji = inverse(p_j) * p_i.
  - Tangent-space increments are left-multiplicative, p <- exp(xi) * p,
    with twist ordering [omega, v] (rotation first).
  - Camera frame: x right, y down, z forward (pixel u along x, v along y).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Depth clamp used by warps during optimisation; avoids division blow-ups
# without measurably biasing indoor-scale scenes.
Z_MIN = 1e-4

_SMALL_ANGLE = 1e-8


class NearSingularRotationError(ValueError):
    """Log map requested too close to the pi-rotation singularity."""


class BehindCameraError(ValueError):
    """Projection of a point at or behind the camera plane."""


def skew(v: np.ndarray) -> np.ndarray:
    """3x3 cross-product matrix: skew(v) @ x == cross(v, x)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    """(N,3) -> (N,3,3) cross-product matrices."""
    n = v.shape[0]
    out = np.zeros((n, 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _matrix_to_quat(m: np.ndarray) -> np.ndarray:
    # Shepperd's method: branch on the largest diagonal combination.
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        w = (m[2, 1] - m[1, 2]) / s
        x = 0.25 * s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        y = 0.25 * s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
        z = 0.25 * s
    return np.array([x, y, z, w])


@dataclass(frozen=True)
class Twist:
    """se(3) tangent vector: omega is axis-angle rotation [rad], v translation [m]."""

    omega: np.ndarray
    v: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])

    @staticmethod
    def from_vector(xi: np.ndarray) -> "Twist":
        xi = np.asarray(xi, dtype=np.float64)
        return Twist(xi[:3].copy(), xi[3:6].copy())


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform stored as unit quaternion (x, y, z, w) plus translation."""

    q: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        q = q / np.linalg.norm(q)
        if q[3] < 0:  # canonical hemisphere keeps the log-map angle <= pi
            q = -q
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).copy())

    @staticmethod
    def identity() -> "SE3Pose":
        return SE3Pose()

    @staticmethod
    def from_matrix(m: np.ndarray) -> "SE3Pose":
        m = np.asarray(m, dtype=np.float64)
        return SE3Pose(_matrix_to_quat(m[:3, :3]), m[:3, 3])

    def rotation_matrix(self) -> np.ndarray:
        return _quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.t
        return m

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        q = _quat_mul(self.q, other.q)
        t = self.rotation_matrix() @ other.t + self.t
        return SE3Pose(q, t)

    def inverse(self) -> "SE3Pose":
        q_inv = np.array([-self.q[0], -self.q[1], -self.q[2], self.q[3]])
        t_inv = -(_quat_to_matrix(q_inv) @ self.t)
        return SE3Pose(q_inv, t_inv)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (3,) or (N,3) points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation_matrix().T + self.t

    def rotation_angle(self) -> float:
        return 2.0 * math.atan2(np.linalg.norm(self.q[:3]), abs(self.q[3]))


def compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    return a.compose(b)


def relative_pose(p_i: SE3Pose, p_j: SE3Pose) -> SE3Pose:
    """T_ji with X_j = T_ji * X_i, for world poses p_i, p_j."""
    return p_j.inverse().compose(p_i)


def _rotation_coeffs(theta: float) -> tuple[float, float, float]:
    """A = sin(t)/t, B = (1-cos t)/t^2, C = (t - sin t)/t^3, series-safe."""
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    t2 = theta * theta
    return (
        math.sin(theta) / theta,
        (1.0 - math.cos(theta)) / t2,
        (theta - math.sin(theta)) / (t2 * theta),
    )


def se3_exp(xi: Twist) -> SE3Pose:
    """Closed-form exponential map; rotation angle equals |omega|."""
    omega = np.asarray(xi.omega, dtype=np.float64)
    v = np.asarray(xi.v, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    half = 0.5 * theta
    if theta < _SMALL_ANGLE:
        # sin(t/2)/t -> 1/2 - t^2/48
        s = 0.5 - theta * theta / 48.0
    else:
        s = math.sin(half) / theta
    q = np.array([omega[0] * s, omega[1] * s, omega[2] * s, math.cos(half)])
    _, b, c = _rotation_coeffs(theta)
    w_hat = skew(omega)
    v_mat = np.eye(3) + b * w_hat + c * (w_hat @ w_hat)
    return SE3Pose(q, v_mat @ v)


def se3_log(p: SE3Pose) -> Twist:
    """Inverse of se3_exp; raises near the pi-rotation singularity."""
    n = float(np.linalg.norm(p.q[:3]))
    w = float(p.q[3])
    theta = 2.0 * math.atan2(n, w)
    if theta > math.pi - 1e-6:
        raise NearSingularRotationError(
            f"rotation angle {theta:.8f} rad is within 1e-6 of pi"
        )
    if n < 1e-12:
        omega = 2.0 * p.q[:3]
    else:
        omega = p.q[:3] * (theta / n)
    if theta < _SMALL_ANGLE:
        coeff = 1.0 / 12.0 + theta * theta / 720.0
    else:
        half = 0.5 * theta
        coeff = (1.0 - half * math.cos(half) / math.sin(half)) / (theta * theta)
    w_hat = skew(omega)
    v_inv = np.eye(3) - 0.5 * w_hat + coeff * (w_hat @ w_hat)
    return Twist(omega, v_inv @ p.t)


def retract(p: SE3Pose, xi: np.ndarray) -> SE3Pose:
    """Left-multiplicative update exp(xi) * p for a 6-vector [omega, v]."""
    return se3_exp(Twist.from_vector(xi)).compose(p)


@dataclass(frozen=True)
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def halved(self) -> "PinholeIntrinsics":
        return PinholeIntrinsics(
            self.fx * 0.5,
            self.fy * 0.5,
            self.cx * 0.5,
            self.cy * 0.5,
            self.width // 2,
            self.height // 2,
        )

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


def project(point: np.ndarray, K: PinholeIntrinsics, z_min: float = Z_MIN) -> np.ndarray:
    """(fx*x/z + cx, fy*y/z + cy) for (3,) or (N,3) camera-frame points."""
    pts = np.asarray(point, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    z = pts[:, 2]
    if np.any(z <= z_min):
        raise BehindCameraError("point at or behind the camera plane")
    pix = np.stack([K.fx * pts[:, 0] / z + K.cx, K.fy * pts[:, 1] / z + K.cy], axis=1)
    return pix[0] if single else pix


def backproject(pixel: np.ndarray, depth, K: PinholeIntrinsics) -> np.ndarray:
    """Lift pixel(s) with depth(s) to camera-frame points."""
    pix = np.asarray(pixel, dtype=np.float64)
    single = pix.ndim == 1
    pix = np.atleast_2d(pix)
    d = np.atleast_1d(np.asarray(depth, dtype=np.float64))
    if np.any(d <= 0):
        raise ValueError("depth must be positive")
    pts = np.stack(
        [(pix[:, 0] - K.cx) * d / K.fx, (pix[:, 1] - K.cy) * d / K.fy, d], axis=1
    )
    return pts[0] if single else pts


def pixel_rays(pixels: np.ndarray, K: PinholeIntrinsics) -> np.ndarray:
    """(N,2) pixels -> (N,3) unit-depth rays ((u-cx)/fx, (v-cy)/fy, 1)."""
    pix = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    return np.stack(
        [(pix[:, 0] - K.cx) / K.fx, (pix[:, 1] - K.cy) / K.fy, np.ones(len(pix))],
        axis=1,
    )


def projection_jacobian(points: np.ndarray, K: PinholeIntrinsics) -> np.ndarray:
    """(N,3) camera points -> (N,2,3) d(pixel)/d(point)."""
    pts = np.atleast_2d(points)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    inv_z = 1.0 / z
    jac = np.zeros((len(pts), 2, 3))
    jac[:, 0, 0] = K.fx * inv_z
    jac[:, 0, 2] = -K.fx * x * inv_z * inv_z
    jac[:, 1, 1] = K.fy * inv_z
    jac[:, 1, 2] = -K.fy * y * inv_z * inv_z
    return jac


def warp_points(
    pixels: np.ndarray,
    depths: np.ndarray,
    T_ji: SE3Pose,
    K: PinholeIntrinsics,
    z_min: float = Z_MIN,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Warp (N,2) pixels of frame i into frame j through their depths.

    Returns (pixels_j (N,2), z_j (N,), valid (N,)). Invalid entries (behind
    the camera or outside the bilinear-sampling domain of frame j) carry
    zeros in pixels_j and their original depth in z_j.
    """
    rays = pixel_rays(pixels, K)
    d = np.atleast_1d(np.asarray(depths, dtype=np.float64))
    pts_j = (rays * d[:, None]) @ T_ji.rotation_matrix().T + T_ji.t
    z = pts_j[:, 2]
    valid = z > z_min
    pix = np.zeros((len(pts_j), 2))
    zs = np.where(valid, z, 1.0)
    pix[:, 0] = K.fx * pts_j[:, 0] / zs + K.cx
    pix[:, 1] = K.fy * pts_j[:, 1] / zs + K.cy
    valid &= (
        (pix[:, 0] >= 0)
        & (pix[:, 0] <= K.width - 1)
        & (pix[:, 1] >= 0)
        & (pix[:, 1] <= K.height - 1)
    )
    pix[~valid] = 0.0
    return pix, z, valid


def warp_pixel(
    x: np.ndarray,
    depth_i: float,
    T_ji: SE3Pose,
    K: PinholeIntrinsics,
    z_min: float = Z_MIN,
) -> tuple[np.ndarray, float, bool]:
    """Warp one pixel of frame i into frame j; also return the transformed z.

    Implements pi(T_ji(pi^-1(x, depth))). Invalidity (out of bounds or
    z <= z_min) is reported through the flag, never as an error.
    """
    if depth_i <= 0:
        raise ValueError("depth must be positive")
    pix, z, valid = warp_points(
        np.asarray(x, dtype=np.float64)[None, :], np.array([depth_i]), T_ji, K, z_min
    )
    return pix[0], float(z[0]), bool(valid[0])


def warp_jacobians(
    x: np.ndarray, depth_i: float, T_ji: SE3Pose, K: PinholeIntrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic warp Jacobians at a single pixel.

    Returns (d_pixel_j / d_xi, d_pixel_j / d_depth) where xi is a
    left-multiplicative tangent increment exp(xi) * T_ji, ordered [omega, v].
    """
    ray = pixel_rays(np.asarray(x, dtype=np.float64)[None, :], K)[0]
    R = T_ji.rotation_matrix()
    pt_j = R @ (ray * depth_i) + T_ji.t
    pj = projection_jacobian(pt_j[None, :], K)[0]
    d_point_d_xi = np.hstack([-skew(pt_j), np.eye(3)])
    d_pix_d_xi = pj @ d_point_d_xi
    d_pix_d_depth = pj @ (R @ ray)
    return d_pix_d_xi, d_pix_d_depth


def look_at_pose(eye: np.ndarray, target: np.ndarray, up=(0.0, -1.0, 0.0)) -> SE3Pose:
    """Camera-to-world pose with +z toward target (x right, y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    x = np.cross(fwd, upv)
    nx = np.linalg.norm(x)
    if nx < 1e-9:  # looking along the up axis, pick any orthogonal right vector
        x = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(fwd, x)
    R = np.column_stack([x, y, fwd])
    return SE3Pose(_matrix_to_quat(R), eye)
