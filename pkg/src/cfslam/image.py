"""Grayscale image utilities: bilinear sampling with gradients and pyramids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import PinholeIntrinsics


def validate_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("images are single-channel HxW arrays")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("intensities must be finite and in [0, 1]")
    return img


def bilinear_sample(
    image: np.ndarray, pixels: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample the bilinear interpolant of `image` at (N,2) pixel coordinates.

    Returns (values, gradients (N,2), valid (N,)). The gradient is the exact
    derivative of the interpolant, so it is what chain rules against warp
    Jacobians. Points outside [0, W-1] x [0, H-1] are invalid and return 0.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    pix = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    u, v = pix[:, 0], pix[:, 1]
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)

    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    # Anchor at w-2/h-2 so the boundary point x == W-1 keeps in-range taps.
    x0 = np.minimum(np.floor(uc).astype(np.intp), w - 2) if w > 1 else np.zeros(len(u), np.intp)
    y0 = np.minimum(np.floor(vc).astype(np.intp), h - 2) if h > 1 else np.zeros(len(v), np.intp)
    fx = uc - x0
    fy = vc - y0

    i00 = img[y0, x0]
    i01 = img[y0, x0 + 1] if w > 1 else i00
    i10 = img[y0 + 1, x0] if h > 1 else i00
    i11 = img[y0 + 1, x0 + 1] if (w > 1 and h > 1) else i00

    top = i00 * (1 - fx) + i01 * fx
    bot = i10 * (1 - fx) + i11 * fx
    values = top * (1 - fy) + bot * fy

    grad = np.zeros((len(u), 2))
    grad[:, 0] = (i01 - i00) * (1 - fy) + (i11 - i10) * fy
    grad[:, 1] = bot - top

    values = np.where(valid, values, 0.0)
    grad[~valid] = 0.0
    return values, grad, valid


def downsample2x(image: np.ndarray) -> np.ndarray:
    """2x2 box-filter downsampling; odd trailing rows/columns are dropped."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    h2, w2 = h // 2, w // 2
    img = img[: 2 * h2, : 2 * w2]
    return 0.25 * (img[0::2, 0::2] + img[0::2, 1::2] + img[1::2, 0::2] + img[1::2, 1::2])


@dataclass
class ImagePyramid:
    """Coarse-to-fine stack; level 0 is the finest (original) resolution."""

    levels: list[tuple[np.ndarray, PinholeIntrinsics]]

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def image(self, level: int) -> np.ndarray:
        return self.levels[level][0]

    def intrinsics(self, level: int) -> PinholeIntrinsics:
        return self.levels[level][1]


def build_pyramid(image: np.ndarray, K: PinholeIntrinsics, levels: int = 4) -> ImagePyramid:
    """Box-filter pyramid with per-level halved intrinsics."""
    if levels < 1:
        raise ValueError("need at least one pyramid level")
    img = np.asarray(image, dtype=np.float64)
    if img.shape[0] < 2 ** (levels - 1) or img.shape[1] < 2 ** (levels - 1):
        raise ValueError(f"image {img.shape} too small for {levels} pyramid levels")
    if img.shape != (K.height, K.width):
        raise ValueError("intrinsics size does not match the image")
    out = [(img, K)]
    for _ in range(levels - 1):
        img = downsample2x(img)
        K = K.halved()
        out.append((img, K))
    return ImagePyramid(out)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(np.asarray(image, dtype=np.float64), sigma, mode="nearest")


def image_gradients(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradients (gx, gy), replicated borders."""
    img = np.asarray(image, dtype=np.float64)
    gy, gx = np.gradient(img)
    return gx, gy
