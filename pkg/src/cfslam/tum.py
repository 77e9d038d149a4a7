"""TUM RGB-D directory I/O: association, loading, trajectory files, writing.

Directory layout: rgb.txt / depth.txt list "timestamp filename" pairs,
groundtruth.txt lists "timestamp tx ty tz qx qy qz qw", '#' starts comments.
Depth PNGs are 16-bit with 5000 units per meter. Images are converted to
grayscale [0, 1] and resized (center-crop to aspect, then scale) to the
working resolution with intrinsics adjusted accordingly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import cv2
import numpy as np

from .geometry import PinholeIntrinsics, SE3Pose

# fr1 camera calibration; overridable per sequence
DEFAULT_TUM_INTRINSICS = PinholeIntrinsics(517.3, 516.5, 318.6, 255.3, 640, 480)
DEFAULT_DEPTH_SCALE = 1.0 / 5000.0
WORKING_SIZE = (256, 192)  # (width, height)


class TumFormatError(ValueError):
    """Missing files, unparseable lines, or empty associations."""


@dataclass
class TumFrame:
    timestamp: float
    rgb_path: str
    depth_path: str | None


@dataclass
class TumSequence:
    directory: str
    frames: list[TumFrame]
    groundtruth: list[tuple[float, SE3Pose]]
    intrinsics: PinholeIntrinsics
    raw_intrinsics: PinholeIntrinsics
    depth_scale: float = DEFAULT_DEPTH_SCALE
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.frames)

    def read_image(self, index: int) -> np.ndarray:
        return _load_gray(
            os.path.join(self.directory, self.frames[index].rgb_path),
            self.raw_intrinsics, self.intrinsics,
        )

    def read_depth(self, index: int) -> np.ndarray | None:
        frame = self.frames[index]
        if frame.depth_path is None:
            return None
        return _load_depth(
            os.path.join(self.directory, frame.depth_path),
            self.raw_intrinsics, self.intrinsics, self.depth_scale,
        )


def _parse_listing(path: str) -> list[tuple[float, str]]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise TumFormatError(f"{path}:{lineno}: expected 'timestamp filename'")
            try:
                out.append((float(parts[0]), parts[1]))
            except ValueError as e:
                raise TumFormatError(f"{path}:{lineno}: bad timestamp") from e
    return out


def parse_trajectory_lines(lines, origin="trajectory") -> list[tuple[float, SE3Pose]]:
    out = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise TumFormatError(f"{origin}:{lineno}: expected 8 fields")
        try:
            vals = [float(p) for p in parts]
        except ValueError as e:
            raise TumFormatError(f"{origin}:{lineno}: bad number") from e
        ts, tx, ty, tz, qx, qy, qz, qw = vals
        out.append((ts, SE3Pose(np.array([qx, qy, qz, qw]), np.array([tx, ty, tz]))))
    return out


def read_trajectory_file(path: str) -> list[tuple[float, SE3Pose]]:
    with open(path) as f:
        return parse_trajectory_lines(f, origin=path)


def write_trajectory_file(path: str, trajectory) -> None:
    """TUM format, 9 significant digits, unit quaternions."""
    with open(path, "w") as f:
        for ts, pose in trajectory:
            tx, ty, tz = pose.t
            qx, qy, qz, qw = pose.q
            f.write(
                f"{ts:.9f} {tx:.9g} {ty:.9g} {tz:.9g} "
                f"{qx:.9g} {qy:.9g} {qz:.9g} {qw:.9g}\n"
            )


def associate_timestamps(
    a: list[float], b: list[float], max_dt: float = 0.02
) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp association, each entry used at most once."""
    candidates = []
    j0 = 0
    for i, ta in enumerate(a):
        for j, tb in enumerate(b):
            dt = abs(ta - tb)
            if dt < max_dt:
                candidates.append((dt, i, j))
    candidates.sort()
    used_a: set[int] = set()
    used_b: set[int] = set()
    matches = []
    for _, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        matches.append((i, j))
    matches.sort()
    return matches


def _crop_and_scale_params(raw: PinholeIntrinsics, target_w: int, target_h: int):
    """Center crop to the target aspect ratio, then scale factors."""
    target_aspect = target_w / target_h
    crop_w, crop_h = raw.width, raw.height
    if raw.width / raw.height > target_aspect:
        crop_w = int(round(raw.height * target_aspect))
    else:
        crop_h = int(round(raw.width / target_aspect))
    x0 = (raw.width - crop_w) // 2
    y0 = (raw.height - crop_h) // 2
    return x0, y0, crop_w, crop_h, target_w / crop_w, target_h / crop_h


def working_intrinsics(
    raw: PinholeIntrinsics, size: tuple[int, int] = WORKING_SIZE
) -> PinholeIntrinsics:
    tw, th = size
    x0, y0, _, _, sx, sy = _crop_and_scale_params(raw, tw, th)
    return PinholeIntrinsics(
        raw.fx * sx, raw.fy * sy, (raw.cx - x0) * sx, (raw.cy - y0) * sy, tw, th
    )


def _crop_resize(img: np.ndarray, raw: PinholeIntrinsics, work: PinholeIntrinsics,
                 interpolation) -> np.ndarray:
    x0, y0, cw, ch, _, _ = _crop_and_scale_params(raw, work.width, work.height)
    crop = img[y0 : y0 + ch, x0 : x0 + cw]
    return cv2.resize(crop, (work.width, work.height), interpolation=interpolation)


def _load_gray(path, raw, work) -> np.ndarray:
    img = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if img is None:
        raise TumFormatError(f"cannot read image {path}")
    if img.ndim == 3:
        # OpenCV loads BGR; weights follow the standard luma coefficients
        img = 0.114 * img[:, :, 0] + 0.587 * img[:, :, 1] + 0.299 * img[:, :, 2]
    img = img.astype(np.float64)
    if img.max() > 1.0:
        img /= 255.0
    return np.clip(_crop_resize(img, raw, work, cv2.INTER_AREA), 0.0, 1.0)


def _load_depth(path, raw, work, scale) -> np.ndarray:
    img = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if img is None:
        raise TumFormatError(f"cannot read depth {path}")
    depth = img.astype(np.float64) * scale
    # nearest keeps invalid zeros from bleeding into valid measurements
    return _crop_resize(depth, raw, work, cv2.INTER_NEAREST)


def load_tum_sequence(
    directory: str,
    intrinsics: PinholeIntrinsics = DEFAULT_TUM_INTRINSICS,
    working_size: tuple[int, int] = WORKING_SIZE,
    depth_scale: float = DEFAULT_DEPTH_SCALE,
    max_dt: float = 0.02,
    require_depth: bool = False,
) -> TumSequence:
    """Associate rgb/depth listings and parse ground truth if present."""
    rgb_file = os.path.join(directory, "rgb.txt")
    if not os.path.exists(rgb_file):
        raise TumFormatError(f"missing {rgb_file}")
    rgb = _parse_listing(rgb_file)
    if not rgb:
        raise TumFormatError("rgb.txt lists no frames")

    depth_file = os.path.join(directory, "depth.txt")
    depth = _parse_listing(depth_file) if os.path.exists(depth_file) else []

    frames: list[TumFrame] = []
    dropped = 0
    if depth:
        matches = associate_timestamps([t for t, _ in rgb], [t for t, _ in depth], max_dt)
        matched_rgb = {i: j for i, j in matches}
        for i, (ts, name) in enumerate(rgb):
            if i in matched_rgb:
                frames.append(TumFrame(ts, name, depth[matched_rgb[i]][1]))
            else:
                dropped += 1
                if not require_depth:
                    frames.append(TumFrame(ts, name, None))
        if require_depth and not frames:
            raise TumFormatError("no rgb/depth associations within tolerance")
    else:
        frames = [TumFrame(ts, name, None) for ts, name in rgb]
    if not frames:
        raise TumFormatError("no usable frames after association")

    gt_file = os.path.join(directory, "groundtruth.txt")
    groundtruth = read_trajectory_file(gt_file) if os.path.exists(gt_file) else []

    return TumSequence(
        directory=directory,
        frames=frames,
        groundtruth=groundtruth,
        intrinsics=working_intrinsics(intrinsics, working_size),
        raw_intrinsics=intrinsics,
        depth_scale=depth_scale,
        dropped=dropped,
    )


def write_tum_sequence(
    directory: str,
    frames,
    K: PinholeIntrinsics,
    depth_scale: float = DEFAULT_DEPTH_SCALE,
    start_time: float = 1305031100.0,
) -> None:
    """Write rendered frames as a TUM-layout dataset (8-bit gray rgb PNGs,
    16-bit depth PNGs, groundtruth.txt)."""
    os.makedirs(os.path.join(directory, "rgb"), exist_ok=True)
    os.makedirs(os.path.join(directory, "depth"), exist_ok=True)
    rgb_lines = ["# color images", "# timestamp filename"]
    depth_lines = ["# depth maps", "# timestamp filename"]
    gt = []
    for frame in frames:
        ts = start_time + frame.timestamp
        name = f"{ts:.6f}.png"
        cv2.imwrite(
            os.path.join(directory, "rgb", name),
            np.clip(np.round(frame.image * 255.0), 0, 255).astype(np.uint8),
        )
        depth_units = np.clip(np.round(frame.depth / depth_scale), 0, 65535).astype(np.uint16)
        cv2.imwrite(os.path.join(directory, "depth", name), depth_units)
        rgb_lines.append(f"{ts:.6f} rgb/{name}")
        depth_lines.append(f"{ts:.6f} depth/{name}")
        gt.append((ts, frame.pose))
    with open(os.path.join(directory, "rgb.txt"), "w") as f:
        f.write("\n".join(rgb_lines) + "\n")
    with open(os.path.join(directory, "depth.txt"), "w") as f:
        f.write("\n".join(depth_lines) + "\n")
    write_trajectory_file(os.path.join(directory, "groundtruth.txt"), gt)


def save_gray_png(path: str, image: np.ndarray) -> None:
    cv2.imwrite(path, np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8))
