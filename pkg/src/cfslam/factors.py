"""Residuals and analytic Jacobians for the pairwise consistency factors.

Three pairwise factor types plus the code prior:

  photometric:  r(x) = I_i(x) - I_j(warp_ji(x))          over a pixel grid
  reprojection: r(m) = warp_ji(x_i) - x_j                 over feature matches
  geometric:    r(x) = [T_ji pi^-1(x, D_i(x))]_z - D_j(warp_ji(x))  over samples
  code prior:   r    = c / sigma_c

All factors are directed (source frame i supplies the depth); the reverse
direction is a separate factor. Jacobians are taken with respect to
left-multiplicative tangent increments on the world poses and directly with
respect to code vectors; invalid terms contribute exactly-zero residual and
Jacobian rows. Robust losses are applied as IRLS sqrt-weight row scaling.

Terms invalidated by the depth clamp are not free: each contributes a fixed
saturation energy to the factor cost (as if its residual sat at a capped
magnitude). Without this, pushing depths into the clamp would delete
residuals wholesale, and the otherwise photometric-neutral monocular scale
direction would ratchet the map into collapse. Plain out-of-bounds terms
stay free: the pure scale direction leaves warps unchanged, so they cannot
feed that ratchet, and charging them would bias tracking near image borders.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import LinearDecoder
from .geometry import (
    SE3Pose,
    Z_MIN,
    pixel_rays,
    projection_jacobian,
    se3_log,
    skew_batch,
)
from .image import bilinear_sample
from .keyframe import Keyframe, OneWayFrame


@dataclass(frozen=True)
class RobustLoss:
    """Residual down-weighting profile: none, huber, or cauchy."""

    kind: str = "none"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "huber", "cauchy"):
            raise ValueError(f"unknown robust loss {self.kind!r}")
        if self.scale <= 0:
            raise ValueError("loss scale must be positive")

    def weight(self, r: np.ndarray) -> np.ndarray:
        """IRLS weight at residual norm r; weight(0) = 1, non-increasing."""
        r = np.asarray(r, dtype=np.float64)
        if self.kind == "none":
            return np.ones_like(r)
        if self.kind == "huber":
            return np.minimum(1.0, self.scale / np.maximum(r, 1e-300))
        return 1.0 / (1.0 + (r / self.scale) ** 2)

    def cost(self, r: np.ndarray) -> np.ndarray:
        """Robustified squared-norm contribution rho(r), rho_none = r^2."""
        r = np.asarray(r, dtype=np.float64)
        if self.kind == "none":
            return r * r
        if self.kind == "huber":
            return np.where(r <= self.scale, r * r, self.scale * (2 * r - self.scale))
        return self.scale**2 * np.log1p((r / self.scale) ** 2)


def robust_weight(loss: RobustLoss, r: float) -> float:
    return float(loss.weight(np.asarray(r)))


# saturation magnitudes assigned to invalid terms (units of each residual)
PHOTOMETRIC_SATURATION = 0.5  # intensity
REPROJECTION_SATURATION = 20.0  # pixels
GEOMETRIC_SATURATION = 0.5  # meters


@dataclass
class FactorEvaluation:
    """Linearization of one factor.

    residual is already sqrt-weight scaled where a robust loss applies, and
    jacobians (keyed "pose_i", "code_i", "pose_j", "code_j", "pose", "code")
    match it row for row. cost is the exact robustified cost 0.5 * sum rho.
    """

    residual: np.ndarray
    jacobians: dict[str, np.ndarray]
    valid_count: int
    cost: float

    @property
    def degenerate(self) -> bool:
        return self.valid_count == 0


def _bilinear_taps(pixels: np.ndarray, height: int, width: int):
    """Corner indices and weights of the bilinear stencil at (N,2) points."""
    u, v = pixels[:, 0], pixels[:, 1]
    valid = (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)
    uc = np.clip(u, 0.0, width - 1.0)
    vc = np.clip(v, 0.0, height - 1.0)
    x0 = np.minimum(np.floor(uc).astype(np.intp), width - 2)
    y0 = np.minimum(np.floor(vc).astype(np.intp), height - 2)
    fx = uc - x0
    fy = vc - y0
    weights = np.stack(
        [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1
    )
    return x0, y0, weights, valid


def sample_depth_with_basis(
    decoder_level: LinearDecoder,
    code: np.ndarray,
    pixels: np.ndarray,
    with_basis: bool = True,
):
    """Bilinearly sample decoded depth, its spatial gradient, and basis rows.

    A point whose stencil touches a clamped pixel is invalid there (the
    affine code model broke), reported separately from plain out-of-bounds
    invalidity. Returns (depth, grad (N,2), basis_rows (N,K) or None,
    in_bounds, clamp_hit).
    """
    dm = decoder_level.decode(code)
    h, w = dm.depths.shape
    pix = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    values, grad, in_bounds = bilinear_sample(dm.depths, pix)
    x0, y0, wts, _ = _bilinear_taps(pix, h, w)
    corners = np.stack(
        [
            dm.clamped[y0, x0],
            dm.clamped[y0, x0 + 1],
            dm.clamped[y0 + 1, x0],
            dm.clamped[y0 + 1, x0 + 1],
        ],
        axis=1,
    )
    clamp_hit = np.any(corners & (wts > 0), axis=1)
    rows = None
    if with_basis:
        basis = decoder_level.basis
        rows = (
            wts[:, 0, None] * basis[y0, x0]
            + wts[:, 1, None] * basis[y0, x0 + 1]
            + wts[:, 2, None] * basis[y0 + 1, x0]
            + wts[:, 3, None] * basis[y0 + 1, x0 + 1]
        )
    return values, grad, rows, in_bounds, clamp_hit


def grid_pixels(width: int, height: int, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    us = np.arange(0, width, stride)
    vs = np.arange(0, height, stride)
    uu, vv = np.meshgrid(us, vs)
    return uu.ravel(), vv.ravel()


class _WarpChain:
    """Shared linearization of x_j = R_j^T (R_i pi^-1(x, d) + t_i - t_j).

    Warps eagerly; Jacobian building blocks are lazy so that cost-only
    evaluations skip them. The pose-j tangent Jacobians are the exact
    negation of the pose-i ones (both act through the world point), which is
    also why pairwise residuals depend only on the relative transform.
    """

    def __init__(self, pixels, depths, pose_i: SE3Pose, pose_j: SE3Pose, K, z_min=Z_MIN):
        self._K = K
        self._rays = pixel_rays(pixels, K)
        self._R_i = pose_i.rotation_matrix()
        self._R_j = pose_j.rotation_matrix()
        self._pts_w = (self._rays * depths[:, None]) @ self._R_i.T + pose_i.t
        pts_j = (self._pts_w - pose_j.t) @ self._R_j
        self.pts_j = pts_j
        self.z = pts_j[:, 2]
        self.valid = self.z > z_min
        safe_z = np.where(self.valid, self.z, 1.0)
        self.pix_j = np.stack(
            [K.fx * pts_j[:, 0] / safe_z + K.cx, K.fy * pts_j[:, 1] / safe_z + K.cy],
            axis=1,
        )
        self._proj = None
        self._point_pose_i = None
        self._point_depth = None

    def _projection(self) -> np.ndarray:
        if self._proj is None:
            safe = np.where(self.valid[:, None], self.pts_j, np.array([0.0, 0.0, 1.0]))
            self._proj = projection_jacobian(safe, self._K)
        return self._proj

    def _pose_block(self) -> np.ndarray:
        # d(point_j)/d(xi_i) = R_j^T [ -skew(point_w) | I ], xi = [omega, v]
        if self._point_pose_i is None:
            block = np.empty((len(self._rays), 3, 6))
            block[:, :, :3] = -np.matmul(self._R_j.T, skew_batch(self._pts_w))
            block[:, :, 3:] = self._R_j.T
            self._point_pose_i = block
        return self._point_pose_i

    def _depth_block(self) -> np.ndarray:
        if self._point_depth is None:
            self._point_depth = self._rays @ (self._R_j.T @ self._R_i).T
        return self._point_depth

    def pixel_pose_i(self) -> np.ndarray:
        return np.matmul(self._projection(), self._pose_block())

    def pixel_depth(self) -> np.ndarray:
        return np.einsum("nij,nj->ni", self._projection(), self._depth_block())

    def z_pose_i(self) -> np.ndarray:
        return self._pose_block()[:, 2, :]

    def z_depth(self) -> np.ndarray:
        return self._depth_block()[:, 2]


def eval_photometric(
    kf_i: Keyframe,
    frame_j: Keyframe | OneWayFrame,
    level: int = 0,
    stride: int = 1,
    weight: float = 20.0,
    pose_i: SE3Pose | None = None,
    code_i: np.ndarray | None = None,
    pose_j: SE3Pose | None = None,
    with_jacobians: bool = True,
) -> FactorEvaluation:
    """Dense intensity-difference factor between frame i pixels and frame j.

    weight converts intensity units into the pixel-unit scale shared with the
    reprojection factor (default: 1 intensity unit counts as 20 px).
    """
    pose_i = kf_i.pose if pose_i is None else pose_i
    code_i = kf_i.code if code_i is None else np.asarray(code_i, dtype=np.float64)
    pose_j = frame_j.pose if pose_j is None else pose_j

    img_i = kf_i.pyramid.image(level)
    img_j = frame_j.pyramid.image(level)
    K = kf_i.pyramid.intrinsics(level)
    if img_i.shape != img_j.shape:
        raise ValueError("photometric factor requires matching pyramid levels")

    dec = kf_i.decoder.at_level(level)
    dm = dec.decode(code_i)
    us, vs = grid_pixels(K.width, K.height, stride)
    pixels = np.stack([us, vs], axis=1).astype(np.float64)
    depths = dm.depths[vs, us]
    source_ok = ~dm.clamped[vs, us]

    chain = _WarpChain(pixels, depths, pose_i, pose_j, K)
    vals_j, grad_j, sample_ok = bilinear_sample(img_j, chain.pix_j)
    valid = chain.valid & sample_ok & source_ok

    residual = np.where(valid, weight * (img_i[vs, us] - vals_j), 0.0)
    cost = 0.5 * float(np.sum(residual * residual))
    cost += 0.5 * (weight * PHOTOMETRIC_SATURATION) ** 2 * int((~source_ok).sum())
    if not with_jacobians:
        return FactorEvaluation(residual, {}, int(valid.sum()), cost)

    g = grad_j * weight
    j_pose_i = -np.einsum("ni,nij->nj", g, chain.pixel_pose_i())
    j_depth = -np.einsum("ni,ni->n", g, chain.pixel_depth())
    j_code = j_depth[:, None] * dec.basis[vs, us, :]
    j_pose_i[~valid] = 0.0
    j_code[~valid] = 0.0
    return FactorEvaluation(
        residual=residual,
        jacobians={"pose_i": j_pose_i, "code_i": j_code, "pose_j": -j_pose_i},
        valid_count=int(valid.sum()),
        cost=cost,
    )


def eval_reprojection(
    kf_i: Keyframe,
    frame_j: Keyframe | OneWayFrame,
    matches,
    loss: RobustLoss = RobustLoss("cauchy", 2.0),
    pose_i: SE3Pose | None = None,
    code_i: np.ndarray | None = None,
    pose_j: SE3Pose | None = None,
    with_jacobians: bool = True,
) -> FactorEvaluation:
    """Matched-feature factor: hypothesised warp location minus observation."""
    if not matches:
        raise ValueError("reprojection factor requires at least one match")
    pose_i = kf_i.pose if pose_i is None else pose_i
    code_i = kf_i.code if code_i is None else np.asarray(code_i, dtype=np.float64)
    pose_j = frame_j.pose if pose_j is None else pose_j

    K = kf_i.pyramid.intrinsics(0)
    dec = kf_i.decoder.at_level(0)
    px_i = np.stack([np.asarray(m.x_i, dtype=np.float64) for m in matches])
    px_j = np.stack([np.asarray(m.x_j, dtype=np.float64) for m in matches])

    depths, _, basis_rows, in_bounds, clamp_hit = sample_depth_with_basis(
        dec, code_i, px_i, with_basis=with_jacobians
    )
    chain = _WarpChain(px_i, np.maximum(depths, dec.d_min), pose_i, pose_j, K)
    # the hypothesised location stays informative off-image; only the depth
    # and the positive-z warp need to be valid
    valid = chain.valid & in_bounds & ~clamp_hit

    r = chain.pix_j - px_j
    norms = np.linalg.norm(r, axis=1)
    sqrt_w = np.sqrt(loss.weight(norms))
    scale = np.where(valid, sqrt_w, 0.0)
    n = len(matches)
    residual = (r * scale[:, None]).reshape(2 * n)
    cost = 0.5 * float(np.sum(loss.cost(norms[valid])))
    cost += 0.5 * float(loss.cost(np.array(REPROJECTION_SATURATION))) * int(clamp_hit.sum())
    if not with_jacobians:
        return FactorEvaluation(residual, {}, int(valid.sum()), cost)

    j_pose_i = chain.pixel_pose_i() * scale[:, None, None]
    j_code = (chain.pixel_depth()[:, :, None] * basis_rows[:, None, :]) * scale[
        :, None, None
    ]
    return FactorEvaluation(
        residual=residual,
        jacobians={
            "pose_i": j_pose_i.reshape(2 * n, 6),
            "code_i": j_code.reshape(2 * n, -1),
            "pose_j": -j_pose_i.reshape(2 * n, 6),
        },
        valid_count=int(valid.sum()),
        cost=cost,
    )


def geometric_sample_grid(
    width: int,
    height: int,
    count_u: int = 32,
    count_v: int = 24,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Uniform sample grid; with an rng, samples jitter inside their cells."""
    su = width / count_u
    sv = height / count_v
    us = (np.arange(count_u) + 0.5) * su
    vs = (np.arange(count_v) + 0.5) * sv
    uu, vv = np.meshgrid(us, vs)
    pix = np.stack([uu.ravel(), vv.ravel()], axis=1)
    if rng is not None:
        pix = pix + rng.uniform(-0.5, 0.5, size=pix.shape) * np.array([su, sv])
    return np.clip(pix, 0.0, [width - 1.0, height - 1.0])


def eval_geometric(
    kf_i: Keyframe,
    kf_j: Keyframe,
    samples: np.ndarray | None = None,
    loss: RobustLoss = RobustLoss("huber", 0.1),
    pose_i: SE3Pose | None = None,
    code_i: np.ndarray | None = None,
    pose_j: SE3Pose | None = None,
    code_j: np.ndarray | None = None,
    with_jacobians: bool = True,
) -> FactorEvaluation:
    """Depth-consistency factor: warped z of frame i against D_j at the warp.

    Both codes are optimised: c_i moves the warped geometry, c_j moves the
    depth map it is compared against.
    """
    pose_i = kf_i.pose if pose_i is None else pose_i
    code_i = kf_i.code if code_i is None else np.asarray(code_i, dtype=np.float64)
    pose_j = kf_j.pose if pose_j is None else pose_j
    code_j = kf_j.code if code_j is None else np.asarray(code_j, dtype=np.float64)

    K = kf_i.pyramid.intrinsics(0)
    dec_i = kf_i.decoder.at_level(0)
    dec_j = kf_j.decoder.at_level(0)
    if samples is None:
        samples = geometric_sample_grid(K.width, K.height)
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))

    d_i, _, basis_i, bounds_i, clamp_i = sample_depth_with_basis(
        dec_i, code_i, samples, with_basis=with_jacobians
    )
    chain = _WarpChain(samples, np.maximum(d_i, dec_i.d_min), pose_i, pose_j, K)
    d_j, grad_j, basis_j, bounds_j, clamp_j = sample_depth_with_basis(
        dec_j, code_j, chain.pix_j, with_basis=with_jacobians
    )
    # clamp flags of out-of-bounds targets read clipped border pixels: ignore
    clamp_hit = clamp_i | (clamp_j & bounds_j)
    valid = bounds_i & ~clamp_hit & chain.valid & bounds_j

    r = chain.z - d_j
    norms = np.abs(r)
    sqrt_w = np.sqrt(loss.weight(norms))
    scale = np.where(valid, sqrt_w, 0.0)
    residual = r * scale
    cost = 0.5 * float(np.sum(loss.cost(norms[valid])))
    cost += 0.5 * float(loss.cost(np.array(GEOMETRIC_SATURATION))) * int(clamp_hit.sum())
    if not with_jacobians:
        return FactorEvaluation(residual, {}, int(valid.sum()), cost)

    pix_pose = chain.pixel_pose_i()
    j_pose_i = (chain.z_pose_i() - np.einsum("ni,nij->nj", grad_j, pix_pose)) * scale[
        :, None
    ]
    j_code_i = (
        (chain.z_depth() - np.einsum("ni,ni->n", grad_j, chain.pixel_depth()))[:, None]
        * basis_i
    ) * scale[:, None]
    j_code_j = -basis_j * scale[:, None]
    return FactorEvaluation(
        residual=residual,
        jacobians={
            "pose_i": j_pose_i,
            "code_i": j_code_i,
            "pose_j": -j_pose_i,
            "code_j": j_code_j,
        },
        valid_count=int(valid.sum()),
        cost=cost,
    )


def eval_zero_code_prior(code: np.ndarray, sigma_c: float = 1.0) -> FactorEvaluation:
    """Gaussian pull of the code toward zero, keeping depth near the prior mean."""
    code = np.asarray(code, dtype=np.float64)
    r = code / sigma_c
    return FactorEvaluation(
        residual=r,
        jacobians={"code": np.eye(len(code)) / sigma_c},
        valid_count=len(code),
        cost=0.5 * float(r @ r),
    )


def eval_pose_prior(pose: SE3Pose, target: SE3Pose, sigma: float) -> FactorEvaluation:
    """Unary pose anchor, r = log(pose * target^-1) / sigma (gauge fixing)."""
    delta = se3_log(pose.compose(target.inverse())).vector()
    r = delta / sigma
    return FactorEvaluation(
        residual=r,
        jacobians={"pose": np.eye(6) / sigma},
        valid_count=6,
        cost=0.5 * float(r @ r),
    )
