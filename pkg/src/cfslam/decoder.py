"""Linear code-to-depth model: depth(c) = zero_depth + basis @ c, clamped.

The decoder is the optimisable geometry representation: a keyframe's dense
depth map is an affine function of a short code vector, so depth Jacobians
with respect to the code are just rows of the stored basis and never need
numerical differentiation. Synthetic backends stand in for an externally
trained model; the binary file format below is the interop point.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .image import downsample2x, image_gradients

D_MIN_DEFAULT = 0.1
D_MAX_DEFAULT = 12.0

_MAGIC = b"CFDC"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIIff4x")  # magic, version, H, W, K, d_min, d_max, pad
MAX_FILE_ELEMENTS = 1 << 28


class DecoderFormatError(ValueError):
    """Malformed decoder file: bad magic/version, sizes, or truncation."""


@dataclass
class DepthMap:
    """Clamped per-pixel depths in meters plus the clamp flags.

    Flagged pixels sit on the [d_min, d_max] boundary where the affine code
    model no longer holds; factors zero their code Jacobians there.
    """

    depths: np.ndarray
    clamped: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.depths.shape


class LinearDecoder:
    """Dense affine depth model with a zero-code depth map and a basis tensor."""

    def __init__(
        self,
        zero_depth: np.ndarray,
        basis: np.ndarray,
        d_min: float = D_MIN_DEFAULT,
        d_max: float = D_MAX_DEFAULT,
    ):
        zero_depth = np.asarray(zero_depth, dtype=np.float64)
        basis = np.asarray(basis, dtype=np.float64)
        if basis.ndim != 3 or basis.shape[:2] != zero_depth.shape:
            raise ValueError("basis must be (H, W, K) matching zero_depth")
        if not 0 < d_min < d_max:
            raise ValueError("need 0 < d_min < d_max")
        if zero_depth.min() < d_min:
            raise ValueError("zero-code depth must be at least d_min everywhere")
        self.zero_depth = zero_depth
        self.basis = basis
        self.d_min = float(d_min)
        self.d_max = float(d_max)
        self._level_cache: dict[int, "LinearDecoder"] = {0: self}

    @property
    def height(self) -> int:
        return self.zero_depth.shape[0]

    @property
    def width(self) -> int:
        return self.zero_depth.shape[1]

    @property
    def code_size(self) -> int:
        return self.basis.shape[2]

    def zero_code(self) -> np.ndarray:
        return np.zeros(self.code_size)

    def decode(self, code: np.ndarray) -> DepthMap:
        """Depth map for a code, clamped to [d_min, d_max] with clamp flags."""
        code = np.asarray(code, dtype=np.float64)
        if code.shape != (self.code_size,):
            raise ValueError(
                f"code has shape {code.shape}, decoder expects ({self.code_size},)"
            )
        raw = self.zero_depth + self.basis @ code
        clamped = (raw < self.d_min) | (raw > self.d_max)
        return DepthMap(np.clip(raw, self.d_min, self.d_max), clamped)

    def at_level(self, level: int) -> "LinearDecoder":
        """Box-downsampled decoder; downsampling is linear so decode commutes
        with it away from clamping."""
        if level not in self._level_cache:
            prev = self.at_level(level - 1)
            zd = downsample2x(prev.zero_depth)
            basis = np.stack(
                [downsample2x(prev.basis[:, :, k]) for k in range(prev.code_size)],
                axis=2,
            )
            dec = LinearDecoder(zd, basis, self.d_min, self.d_max)
            self._level_cache[level] = dec
        return self._level_cache[level]

    def fit_code(self, target, tikhonov: float = 1e-6) -> np.ndarray:
        """Least-squares code for a target depth map (Tikhonov-regularised).

        Accepts a DepthMap or a plain array; clamped and non-positive pixels
        are excluded so saturation does not bias the affine fit.
        """
        if isinstance(target, DepthMap):
            depths, mask = target.depths, ~target.clamped
        else:
            depths = np.asarray(target, dtype=np.float64)
            mask = np.ones(depths.shape, dtype=bool)
        if depths.shape != self.zero_depth.shape:
            raise ValueError("target shape does not match the decoder")
        mask = mask & (depths > 0)
        B = self.basis[mask]
        r = depths[mask] - self.zero_depth[mask]
        G = B.T @ B + tikhonov * np.eye(self.code_size)
        c = np.linalg.solve(G, B.T @ r)
        # refinement steps shrink the Tikhonov bias geometrically while the
        # regularised matrix keeps rank-deficient directions harmless
        for _ in range(3):
            c += np.linalg.solve(G, B.T @ (r - B @ c))
        return c


def decode(decoder: LinearDecoder, code: np.ndarray) -> DepthMap:
    return decoder.decode(code)


def fit_code_to_depth(decoder: LinearDecoder, target, tikhonov: float = 1e-6) -> np.ndarray:
    return decoder.fit_code(target, tikhonov)


def _grid_shape(code_size: int, width: int, height: int) -> tuple[int, int]:
    """Factor the code size into a control grid close to the image aspect."""
    aspect = width / height
    best = None
    for rows in range(1, code_size + 1):
        if code_size % rows:
            continue
        cols = code_size // rows
        score = abs(math.log((cols / rows) / aspect))
        if best is None or score < best[0]:
            best = (score, cols, rows)
    assert best is not None
    if best[0] > math.log(4.0):
        raise ValueError(
            f"code size {code_size} has no near-aspect control-grid factorisation"
        )
    return best[1], best[2]


def _axis_weights(length: int, knots: int) -> np.ndarray:
    """(length, knots) tent weights of a uniform control lattice spanning the axis."""
    if knots == 1:
        return np.ones((length, 1))
    x = np.arange(length, dtype=np.float64)
    spacing = (length - 1) / (knots - 1)
    centers = np.arange(knots) * spacing
    return np.clip(1.0 - np.abs(x[:, None] - centers[None, :]) / spacing, 0.0, None)


def build_synthetic_decoder(
    width: int,
    height: int,
    code_size: int = 32,
    kind: str = "smooth",
    image: np.ndarray | None = None,
    d0: float = 2.0,
    gain: float = 1.0,
    d_min: float = D_MIN_DEFAULT,
    d_max: float = D_MAX_DEFAULT,
    edge_lambda: float = 10.0,
) -> LinearDecoder:
    """Stand-in decoder backends.

    "smooth": image-independent basis of bilinear bumps on a control grid with
    grid_cells == code_size; the slices form a partition of unity times the
    gain and the zero-code depth is a constant plane at d0.
    "edge_aware": the same slices attenuated per pixel by exp(-lambda * |grad I|),
    confining each bump's support to low-gradient regions of the given image.
    """
    if code_size < 1:
        raise ValueError("code size must be at least 1")
    cols, rows = _grid_shape(code_size, width, height)
    wu = _axis_weights(width, cols)
    wv = _axis_weights(height, rows)
    # slice index = row * cols + col, row-major over the control grid
    basis = gain * np.einsum("vr,uc->vurc", wv, wu).reshape(height, width, code_size)
    if kind == "edge_aware":
        if image is None:
            raise ValueError("edge_aware backend requires an image")
        gx, gy = image_gradients(image)
        wgt = np.exp(-edge_lambda * np.hypot(gx, gy))
        basis = basis * wgt[:, :, None]
    elif kind != "smooth":
        raise ValueError(f"unknown decoder backend {kind!r}")
    zero_depth = np.full((height, width), float(d0))
    return LinearDecoder(zero_depth, basis, d_min, d_max)


def save_decoder(decoder: LinearDecoder, path) -> None:
    """Write the little-endian binary format (32-byte header + f32 payload)."""
    header = _HEADER.pack(
        _MAGIC,
        _VERSION,
        decoder.height,
        decoder.width,
        decoder.code_size,
        decoder.d_min,
        decoder.d_max,
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(decoder.zero_depth, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(decoder.basis, dtype="<f4").tobytes())


def load_decoder(path, max_elements: int = MAX_FILE_ELEMENTS) -> LinearDecoder:
    """Read a decoder file; size limits are checked before any allocation."""
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise DecoderFormatError("truncated header")
        magic, version, h, w, k, d_min, d_max = _HEADER.unpack(raw)
        if magic != _MAGIC:
            raise DecoderFormatError(f"bad magic {magic!r}")
        if version != _VERSION:
            raise DecoderFormatError(f"unsupported version {version}")
        if min(h, w, k) < 1:
            raise DecoderFormatError("non-positive dimensions in header")
        if h * w * k > max_elements:
            raise DecoderFormatError(
                f"payload of {h}x{w}x{k} elements exceeds the {max_elements} bound"
            )
        if not 0 < d_min < d_max:
            raise DecoderFormatError("invalid depth clamp range in header")
        zd_bytes = f.read(4 * h * w)
        if len(zd_bytes) != 4 * h * w:
            raise DecoderFormatError("truncated zero-depth payload")
        basis_bytes = f.read(4 * h * w * k)
        if len(basis_bytes) != 4 * h * w * k:
            raise DecoderFormatError("truncated basis payload")
        zd = np.frombuffer(zd_bytes, dtype="<f4")
        basis = np.frombuffer(basis_bytes, dtype="<f4")
    return LinearDecoder(
        zd.astype(np.float64).reshape(h, w),
        basis.astype(np.float64).reshape(h, w, k),
        float(d_min),
        float(d_max),
    )
