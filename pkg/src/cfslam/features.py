"""Corner detection, binary patch descriptors, and mutual-NN matching.

A deterministic stand-in for heavier keypoint stacks: Shi-Tomasi corners with
non-max suppression, 256-bit descriptors from a seeded pixel-comparison
pattern on a smoothed patch, Hamming matching with a ratio test. The match
output feeds the reprojection factor; anything producing the same match
records can be dropped in instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .image import gaussian_blur, image_gradients

PATCH_RADIUS = 15
DESCRIPTOR_BITS = 256
_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


@dataclass(frozen=True)
class FeatureMatch:
    """A pair of matched pixels (frame i -> frame j) with descriptor distance."""

    x_i: np.ndarray
    x_j: np.ndarray
    descriptor_distance: float


@dataclass
class FeatureSet:
    pixels: np.ndarray  # (N, 2) float: (u, v)
    descriptors: np.ndarray  # (N, 32) uint8, 256 bits packed
    responses: np.ndarray  # (N,) corner responses

    def __len__(self) -> int:
        return len(self.pixels)


def _comparison_pattern(seed: int) -> np.ndarray:
    """(bits, 2, 2) integer tap offsets inside the patch, fixed by the seed."""
    rng = np.random.default_rng(seed)
    pattern = rng.normal(0.0, PATCH_RADIUS / 2.5, size=(DESCRIPTOR_BITS, 2, 2))
    return np.clip(np.round(pattern), -PATCH_RADIUS, PATCH_RADIUS).astype(np.intp)


def detect_features(
    image: np.ndarray,
    max_features: int = 500,
    seed: int = 7,
    response_floor: float = 1e-4,
    nms_radius: int = 2,
    smoothing_sigma: float = 2.0,
) -> FeatureSet:
    """Shi-Tomasi corners plus binary descriptors; deterministic given the seed."""
    img = np.asarray(image, dtype=np.float64)
    gx, gy = image_gradients(img)
    ixx = ndimage.gaussian_filter(gx * gx, 1.5, mode="nearest")
    iyy = ndimage.gaussian_filter(gy * gy, 1.5, mode="nearest")
    ixy = ndimage.gaussian_filter(gx * gy, 1.5, mode="nearest")
    # smaller eigenvalue of the structure tensor
    half_tr = 0.5 * (ixx + iyy)
    response = half_tr - np.sqrt(np.maximum(0.25 * (ixx - iyy) ** 2 + ixy * ixy, 0.0))

    size = 2 * nms_radius + 1
    local_max = response == ndimage.maximum_filter(response, size=size, mode="nearest")
    mask = local_max & (response > response_floor)
    margin = PATCH_RADIUS + 1
    mask[:margin, :] = False
    mask[-margin:, :] = False
    mask[:, :margin] = False
    mask[:, -margin:] = False

    vs, us = np.nonzero(mask)
    if len(vs) == 0:
        return FeatureSet(np.zeros((0, 2)), np.zeros((0, 32), np.uint8), np.zeros(0))
    resp = response[vs, us]
    order = np.lexsort((us, vs, -resp))[:max_features]
    vs, us, resp = vs[order], us[order], resp[order]

    smooth = gaussian_blur(img, smoothing_sigma)
    pattern = _comparison_pattern(seed)
    # taps: (N, bits) comparisons a < b on the smoothed patch around each corner
    a = smooth[vs[:, None] + pattern[None, :, 0, 1], us[:, None] + pattern[None, :, 0, 0]]
    b = smooth[vs[:, None] + pattern[None, :, 1, 1], us[:, None] + pattern[None, :, 1, 0]]
    bits = (a < b).astype(np.uint8)
    descriptors = np.packbits(bits, axis=1)

    pixels = np.stack([us.astype(np.float64), vs.astype(np.float64)], axis=1)
    return FeatureSet(pixels, descriptors, resp)


def hamming_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(Na, Nb) Hamming distance matrix between packed descriptor sets."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.int64)
    xored = a[:, None, :] ^ b[None, :, :]
    return _POPCOUNT[xored].sum(axis=2).astype(np.int64)


def match_features(
    a: FeatureSet, b: FeatureSet, ratio: float = 0.8
) -> list[FeatureMatch]:
    """Mutual nearest neighbours under Hamming distance with a ratio test."""
    if len(a) == 0 or len(b) == 0:
        return []
    dist = hamming_distances(a.descriptors, b.descriptors)
    best_ab = np.argmin(dist, axis=1)
    best_ba = np.argmin(dist, axis=0)
    matches: list[FeatureMatch] = []
    for i, j in enumerate(best_ab):
        if best_ba[j] != i:
            continue
        d1 = dist[i, j]
        if dist.shape[1] > 1:
            row = dist[i].copy()
            row[j] = np.iinfo(np.int64).max
            d2 = row.min()
            if not d1 < ratio * d2:
                continue
        matches.append(FeatureMatch(a.pixels[i].copy(), b.pixels[j].copy(), float(d1)))
    return matches


def flip_matches(matches: list[FeatureMatch]) -> list[FeatureMatch]:
    return [FeatureMatch(m.x_j, m.x_i, m.descriptor_distance) for m in matches]
