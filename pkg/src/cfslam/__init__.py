"""Dense monocular SLAM on a compact linear depth-code manifold.

Per-keyframe depth lives on a low-dimensional affine code manifold; keyframe
poses and codes are jointly optimised in a factor graph combining
photometric, reprojection, and sparse geometric consistency factors, with
one-way-frame marginalisation, direct tracking, and loop closure.
"""

__version__ = "0.1.0"

from .geometry import PinholeIntrinsics, SE3Pose, Twist, se3_exp, se3_log  # noqa: F401
from .decoder import LinearDecoder, build_synthetic_decoder, load_decoder, save_decoder  # noqa: F401
