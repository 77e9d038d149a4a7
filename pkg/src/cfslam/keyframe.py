"""Keyframe and one-way frame containers.

A keyframe owns an optimisable pose and depth code plus cached per-level
depth maps; one-way frames are pose-only and never carry depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import DepthMap, LinearDecoder
from .features import FeatureSet, detect_features
from .geometry import PinholeIntrinsics, SE3Pose
from .image import ImagePyramid, build_pyramid


@dataclass
class Keyframe:
    id: int
    timestamp: float
    pose: SE3Pose
    code: np.ndarray
    pyramid: ImagePyramid
    decoder: LinearDecoder
    depth_levels: list[DepthMap] = field(default_factory=list)
    features: FeatureSet | None = None

    def __post_init__(self):
        if not self.depth_levels:
            self._refresh_depth()

    def _refresh_depth(self):
        self.depth_levels = [
            self.decoder.at_level(level).decode(self.code)
            for level in range(self.pyramid.num_levels)
        ]

    def set_code(self, code: np.ndarray) -> None:
        """Update the code and refresh the cached depth pyramid."""
        self.code = np.asarray(code, dtype=np.float64).copy()
        self._refresh_depth()

    def depth(self, level: int = 0) -> DepthMap:
        return self.depth_levels[level]

    def median_depth(self) -> float:
        return float(np.median(self.depth_levels[0].depths))

    def intrinsics(self, level: int = 0) -> PinholeIntrinsics:
        return self.pyramid.intrinsics(level)


@dataclass
class OneWayFrame:
    """Pose-only frame feeding photometric observations to a keyframe."""

    id: int
    timestamp: float
    pose: SE3Pose
    pyramid: ImagePyramid


def make_keyframe(
    frame_id: int,
    timestamp: float,
    image: np.ndarray,
    K: PinholeIntrinsics,
    pose: SE3Pose,
    decoder: LinearDecoder,
    code: np.ndarray | None = None,
    levels: int = 4,
    max_features: int = 500,
    feature_seed: int = 7,
) -> Keyframe:
    pyramid = build_pyramid(image, K, levels)
    if code is None:
        code = decoder.zero_code()
    kf = Keyframe(frame_id, timestamp, pose, np.asarray(code, dtype=np.float64).copy(), pyramid, decoder)
    kf.features = detect_features(image, max_features=max_features, seed=feature_seed)
    return kf


def make_oneway_frame(
    frame_id: int,
    timestamp: float,
    image: np.ndarray,
    K: PinholeIntrinsics,
    pose: SE3Pose,
    levels: int = 4,
) -> OneWayFrame:
    return OneWayFrame(frame_id, timestamp, pose, build_pyramid(image, K, levels))
