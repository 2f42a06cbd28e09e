"""Joint image/mask augmentation: random-ratio crops, rotation, and flips.

Every transform applies one geometric mapping to the image and its mask:
images are resampled bilinearly, masks with nearest-neighbor so they stay
binary. Images may be 2D ``[H, W]`` or channel-stacked ``[C, H, W]``; all
channels share the transform. Randomness comes from an explicit
``numpy.random.Generator`` so callers own determinism and parallelism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

HORIZONTAL = "horizontal"
VERTICAL = "vertical"


@dataclass(frozen=True)
class AugmentPolicy:
    """Declarative augmentation recipe; draws happen in :func:`apply_policy`."""

    crop_ratio_range: tuple[float, float] = (0.5, 1.0)
    rotate: bool = True
    max_rotate_degrees: float = 10.0
    flip_horizontal: bool = True
    flip_vertical: bool = False
    output_size: tuple[int, int] | None = None
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.crop_ratio_range
        if not (0.5 <= lo <= hi <= 1.0):
            raise ValueError(
                f"crop_ratio_range must satisfy 0.5 <= min <= max <= 1.0, got {self.crop_ratio_range}"
            )
        if self.max_rotate_degrees < 0:
            raise ValueError("max_rotate_degrees must be >= 0")


def _plane_shape(image: np.ndarray) -> tuple[int, int]:
    if image.ndim == 2:
        return image.shape
    if image.ndim == 3:
        return image.shape[1:]
    raise ValueError(f"image must be [H, W] or [C, H, W], got shape {image.shape}")


def _check_pair(image: np.ndarray, mask: np.ndarray | None):
    if mask is not None and mask.shape != _plane_shape(image):
        raise ValueError(f"mask shape {mask.shape} does not match image plane {_plane_shape(image)}")


def _sample_bilinear(plane: np.ndarray, rows, cols, fill: float | None) -> np.ndarray:
    """Sample a 2D plane at float coords; fill=None replicates the edge instead."""
    if fill is None:
        padded = np.pad(plane.astype(np.float64), 1, mode="edge")
    else:
        padded = np.pad(plane.astype(np.float64), 1, mode="constant", constant_values=fill)
    r = np.clip(rows + 1.0, 0.0, padded.shape[0] - 1.0)
    c = np.clip(cols + 1.0, 0.0, padded.shape[1] - 1.0)
    r0 = np.floor(r).astype(np.intp)
    c0 = np.floor(c).astype(np.intp)
    r1 = np.minimum(r0 + 1, padded.shape[0] - 1)
    c1 = np.minimum(c0 + 1, padded.shape[1] - 1)
    fr = r - r0
    fc = c - c0
    top = padded[r0, c0] * (1 - fc) + padded[r0, c1] * fc
    bot = padded[r1, c0] * (1 - fc) + padded[r1, c1] * fc
    return (top * (1 - fr) + bot * fr).astype(plane.dtype, copy=False)


def _sample_nearest(plane: np.ndarray, rows, cols, fill=0) -> np.ndarray:
    r = np.rint(rows).astype(np.intp)
    c = np.rint(cols).astype(np.intp)
    inside = (r >= 0) & (r < plane.shape[0]) & (c >= 0) & (c < plane.shape[1])
    out = np.full(rows.shape, fill, dtype=plane.dtype)
    out[inside] = plane[r[inside], c[inside]]
    return out


def _warp(image: np.ndarray, mask, rows, cols, fill: float | None):
    if image.ndim == 2:
        warped = _sample_bilinear(image, rows, cols, fill)
    else:
        warped = np.stack([_sample_bilinear(ch, rows, cols, fill) for ch in image])
    warped_mask = None if mask is None else _sample_nearest(mask, rows, cols)
    return warped, warped_mask


def random_ratio_crop(image, mask, ratio: float, rng: np.random.Generator,
                      output_size: tuple[int, int] | None = None):
    """Crop side fractions ``ratio`` at a uniform random offset, resize back.

    The image is resized with bilinear interpolation, the mask with
    nearest-neighbor; both share the crop window. ``ratio=1.0`` with the
    default output size is the exact identity.
    """
    image = np.asarray(image)
    mask = None if mask is None else np.asarray(mask)
    _check_pair(image, mask)
    if not 0.5 <= ratio <= 1.0:
        raise ValueError(f"crop ratio must be in [0.5, 1.0], got {ratio}")
    h, w = _plane_shape(image)
    out_h, out_w = output_size if output_size is not None else (h, w)
    ch = max(1, int(round(h * ratio)))
    cw = max(1, int(round(w * ratio)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    if (ch, cw) == (out_h, out_w):
        region = (slice(top, top + ch), slice(left, left + cw))
        cropped = image[..., region[0], region[1]].copy()
        return cropped, (None if mask is None else mask[region].copy())
    rows = top + (np.arange(out_h, dtype=np.float64) + 0.5) * ch / out_h - 0.5
    cols = left + (np.arange(out_w, dtype=np.float64) + 0.5) * cw / out_w - 0.5
    rows, cols = np.meshgrid(rows, cols, indexing="ij")
    return _warp(image, mask, rows, cols, fill=None)


def flip(image, mask, axis: str):
    """Mirror image and mask along ``horizontal`` (left-right) or ``vertical`` (up-down)."""
    image = np.asarray(image)
    mask = None if mask is None else np.asarray(mask)
    _check_pair(image, mask)
    if axis == HORIZONTAL:
        ax = -1
    elif axis == VERTICAL:
        ax = -2
    else:
        raise ValueError(f"axis must be '{HORIZONTAL}' or '{VERTICAL}', got {axis!r}")
    flipped = np.flip(image, axis=ax).copy()
    return flipped, (None if mask is None else np.flip(mask, axis=ax).copy())


def rotate(image, mask, degrees: float):
    """Rotate counter-clockwise about the plane center.

    Outside the original support the image is padded with its minimum
    (the background intensity) and the mask with zero.
    """
    image = np.asarray(image)
    mask = None if mask is None else np.asarray(mask)
    _check_pair(image, mask)
    if degrees == 0.0:
        return image.copy(), (None if mask is None else mask.copy())
    h, w = _plane_shape(image)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    dr, dc = rr - cy, cc - cx
    rows = cy + cos_t * dr + sin_t * dc
    cols = cx - sin_t * dr + cos_t * dc
    return _warp(image, mask, rows, cols, fill=float(image.min()))


def apply_policy(image, mask, policy: AugmentPolicy, rng: np.random.Generator):
    """Draw one augmentation from the policy and apply it: crop, rotate, then flips."""
    lo, hi = policy.crop_ratio_range
    ratio = float(rng.uniform(lo, hi)) if hi > lo else lo
    image, mask = random_ratio_crop(image, mask, ratio, rng, output_size=policy.output_size)
    if policy.rotate and policy.max_rotate_degrees > 0:
        angle = float(rng.uniform(-policy.max_rotate_degrees, policy.max_rotate_degrees))
        image, mask = rotate(image, mask, angle)
    if policy.flip_horizontal and rng.random() < 0.5:
        image, mask = flip(image, mask, HORIZONTAL)
    if policy.flip_vertical and rng.random() < 0.5:
        image, mask = flip(image, mask, VERTICAL)
    return image, mask
