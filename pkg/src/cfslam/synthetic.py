"""Ray-cast synthetic scenes: textured planes and spheres with ground truth.

Rendering is deterministic given the scene seed. Textures are smooth
multi-octave value noise evaluated at the 3D hit point, so images carry the
gradients photometric alignment needs and are consistent across viewpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import PinholeIntrinsics, SE3Pose, look_at_pose

DEFAULT_INTRINSICS = PinholeIntrinsics(128.0, 128.0, 128.0, 96.0, 256, 192)


@dataclass
class Plane:
    point: np.ndarray
    normal: np.ndarray
    half_extents: tuple[float, float] | None = None  # None: unbounded
    albedo: float = 0.9
    texture_scale: float = 1.5

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)
        # in-plane axes for the extent test
        helper = np.array([1.0, 0.0, 0.0])
        if abs(self.normal @ helper) > 0.9:
            helper = np.array([0.0, 1.0, 0.0])
        u = np.cross(self.normal, helper)
        self._u = u / np.linalg.norm(u)
        self._v = np.cross(self.normal, self._u)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Ray parameters (origins + s * dirs); inf where missed."""
        denom = dirs @ self.normal
        num = (self.point - origins) @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
        s = np.where(s > 1e-9, s, np.inf)
        if self.half_extents is not None:
            hits = origins + s[:, None] * np.where(np.isfinite(s)[:, None], dirs, 0.0)
            rel = hits - self.point
            inside = (np.abs(rel @ self._u) <= self.half_extents[0]) & (
                np.abs(rel @ self._v) <= self.half_extents[1]
            )
            s = np.where(inside, s, np.inf)
        return s

    def normals_at(self, hits: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.normal, hits.shape)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: float = 0.9
    texture_scale: float = 1.5

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origins - self.center
        a = np.sum(dirs * dirs, axis=1)
        b = 2.0 * np.sum(oc * dirs, axis=1)
        c = np.sum(oc * oc, axis=1) - self.radius**2
        disc = b * b - 4 * a * c
        s = np.full(len(dirs), np.inf)
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        s1 = (-b - sq) / (2 * a)
        s2 = (-b + sq) / (2 * a)
        near = np.where(s1 > 1e-9, s1, s2)
        s = np.where(ok & (near > 1e-9), near, np.inf)
        return s

    def normals_at(self, hits: np.ndarray) -> np.ndarray:
        n = hits - self.center
        return n / np.linalg.norm(n, axis=1, keepdims=True)


@dataclass
class SyntheticScene:
    surfaces: list
    light_dir: np.ndarray = field(default_factory=lambda: np.array([0.3, -0.5, 0.8]))
    ambient: float = 0.45
    texture_seed: int = 11
    texture_octaves: int = 3
    trajectory: list[tuple[float, SE3Pose]] = field(default_factory=list)

    def __post_init__(self):
        d = np.asarray(self.light_dir, dtype=np.float64)
        self.light_dir = d / np.linalg.norm(d)


def _lattice_hash(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray, seed: int) -> np.ndarray:
    h = (
        ix.astype(np.int64) * 73856093
        ^ iy.astype(np.int64) * 19349663
        ^ iz.astype(np.int64) * 83492791
        ^ np.int64(seed) * 2654435761
    )
    h = (h ^ (h >> 13)) * 1274126177
    h = h ^ (h >> 16)
    return (h & 0xFFFFFF).astype(np.float64) / float(0xFFFFFF)


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def value_noise(points: np.ndarray, seed: int, octaves: int = 3) -> np.ndarray:
    """Multi-octave trilinear value noise in [0, 1] at (N,3) points."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    total = np.zeros(len(pts))
    amp_sum = 0.0
    amp = 1.0
    freq = 1.0
    for octave in range(octaves):
        p = pts * freq
        i0 = np.floor(p).astype(np.int64)
        f = _smoothstep(p - i0)
        acc = np.zeros(len(pts))
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    corner = _lattice_hash(
                        i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz, seed + octave
                    )
                    w = (
                        (f[:, 0] if dx else 1 - f[:, 0])
                        * (f[:, 1] if dy else 1 - f[:, 1])
                        * (f[:, 2] if dz else 1 - f[:, 2])
                    )
                    acc += corner * w
        total += amp * acc
        amp_sum += amp
        amp *= 0.5
        freq *= 2.0
    return total / amp_sum


def render_synthetic(
    scene: SyntheticScene, pose: SE3Pose, K: PinholeIntrinsics = DEFAULT_INTRINSICS
) -> tuple[np.ndarray, np.ndarray]:
    """Render (image, depth); depth is camera-frame z, 0 where no surface."""
    us, vs = np.meshgrid(np.arange(K.width), np.arange(K.height))
    rays_cam = np.stack(
        [(us.ravel() - K.cx) / K.fx, (vs.ravel() - K.cy) / K.fy, np.ones(us.size)],
        axis=1,
    )
    R = pose.rotation_matrix()
    dirs = rays_cam @ R.T  # z-component of rays_cam is 1, so s equals depth
    origins = np.broadcast_to(pose.t, dirs.shape)

    best_s = np.full(len(dirs), np.inf)
    best_idx = np.full(len(dirs), -1)
    for idx, surf in enumerate(scene.surfaces):
        s = surf.intersect(origins, dirs)
        closer = s < best_s
        best_s = np.where(closer, s, best_s)
        best_idx = np.where(closer, idx, best_idx)

    hit = np.isfinite(best_s)
    depth = np.where(hit, best_s, 0.0)
    intensity = np.zeros(len(dirs))
    for idx, surf in enumerate(scene.surfaces):
        sel = hit & (best_idx == idx)
        if not np.any(sel):
            continue
        hits = origins[sel] + best_s[sel, None] * dirs[sel]
        tex = value_noise(
            hits * surf.texture_scale, scene.texture_seed + 101 * idx, scene.texture_octaves
        )
        normals = surf.normals_at(hits)
        lambert = np.abs(normals @ scene.light_dir)
        shade = scene.ambient + (1.0 - scene.ambient) * lambert
        intensity[sel] = surf.albedo * (0.25 + 0.75 * tex) * shade
    image = np.clip(intensity, 0.0, 1.0).reshape(K.height, K.width)
    return image, depth.reshape(K.height, K.width)


def coverage(scene: SyntheticScene, pose: SE3Pose, K: PinholeIntrinsics = DEFAULT_INTRINSICS) -> float:
    _, depth = render_synthetic(scene, pose, K)
    return float(np.mean(depth > 0))


@dataclass
class SequenceFrame:
    timestamp: float
    image: np.ndarray
    depth: np.ndarray
    pose: SE3Pose


def generate_sequence(
    scene: SyntheticScene,
    K: PinholeIntrinsics = DEFAULT_INTRINSICS,
    noise_sigma: float = 0.005,
    seed: int = 0,
    min_coverage: float = 0.5,
) -> list[SequenceFrame]:
    """Render the scene trajectory into frames with ground truth.

    Raises when any viewpoint sees surfaces in fewer than min_coverage of its
    pixels; additive intensity noise is seeded and clipped back to [0, 1].
    """
    rng = np.random.default_rng(seed)
    frames = []
    for ts, pose in scene.trajectory:
        image, depth = render_synthetic(scene, pose, K)
        cov = float(np.mean(depth > 0))
        if cov < min_coverage:
            raise ValueError(f"viewpoint at t={ts} sees only {cov:.0%} surface coverage")
        if noise_sigma > 0:
            image = np.clip(image + rng.normal(0.0, noise_sigma, image.shape), 0.0, 1.0)
        frames.append(SequenceFrame(float(ts), image, depth, pose))
    return frames


# --- trajectory builders -----------------------------------------------------


def orbit_trajectory(
    target: np.ndarray,
    standoff: float,
    frames: int,
    span_degrees: float = 60.0,
    rate: float = 30.0,
    bob: float = 0.0,
) -> list[tuple[float, SE3Pose]]:
    """Arc around the target at constant distance, always looking at it."""
    target = np.asarray(target, dtype=np.float64)
    out = []
    span = math.radians(span_degrees)
    for k in range(frames):
        a = span * (k / max(frames - 1, 1) - 0.5)
        eye = target + standoff * np.array([math.sin(a), 0.0, -math.cos(a)])
        eye = eye + np.array([0.0, bob * math.sin(2 * math.pi * k / max(frames - 1, 1)), 0.0])
        out.append((k / rate, look_at_pose(eye, target)))
    return out


def loop_trajectory(
    target: np.ndarray,
    radius: float,
    frames: int,
    rate: float = 30.0,
    closure_fraction: float = 1.0,
    standoff: float = 2.0,
) -> list[tuple[float, SE3Pose]]:
    """Closed circuit: the camera circles laterally and returns to the start.

    closure_fraction 1.0 traverses the full circle so the final frames revisit
    the first viewpoints.
    """
    target = np.asarray(target, dtype=np.float64)
    out = []
    center = target - np.array([0.0, 0.0, standoff])
    for k in range(frames):
        a = 2.0 * math.pi * closure_fraction * k / (frames - 1)
        eye = center + radius * np.array([math.sin(a), 0.0, -math.cos(a)])
        out.append((k / rate, look_at_pose(eye, target)))
    return out


def sweep_trajectory(
    start: np.ndarray,
    end: np.ndarray,
    target: np.ndarray,
    frames: int,
    rate: float = 30.0,
    there_and_back: bool = False,
) -> list[tuple[float, SE3Pose]]:
    """Linear translation from start to end, gaze fixed on the target."""
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    out = []
    for k in range(frames):
        f = k / max(frames - 1, 1)
        if there_and_back:
            f = 1.0 - abs(2.0 * f - 1.0)
        eye = start + f * (end - start)
        out.append((k / rate, look_at_pose(eye, target)))
    return out


def wavy_wall_scene(
    seed: int = 11,
    depth0: float = 2.0,
    tilt: float = 0.12,
    sphere: bool = True,
) -> SyntheticScene:
    """A gently tilted textured wall (plus an optional sphere) centered near
    the decoder's zero-code depth, so the surface is representable by a
    coarse smooth basis and the prior does not fight the data scale."""
    normal = np.array([math.sin(tilt), 0.15 * math.sin(tilt), -math.cos(tilt)])
    surfaces: list = [Plane(np.array([0.0, 0.0, depth0]), normal)]
    if sphere:
        surfaces.append(Sphere(np.array([0.45, 0.2, depth0 - 0.35]), 0.55, albedo=0.85))
    return SyntheticScene(surfaces, texture_seed=seed)
