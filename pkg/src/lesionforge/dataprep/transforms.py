"""Resizing and geometric augmentation."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from .samples import ImageSample, to_unit


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres, clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (src - lo).astype(np.float32)
    return lo, hi, frac


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an H x W or H x W x C array."""
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"cannot resize zero-sized array {arr.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"invalid target size {out_h}x{out_w}")
    arr = arr.astype(np.float32, copy=False)
    if arr.shape[:2] == (out_h, out_w):
        return arr.copy()
    lo, hi, f = _axis_weights(arr.shape[0], out_h)
    fr = f.reshape((-1,) + (1,) * (arr.ndim - 1))
    top, bottom = arr[lo], arr[hi]
    rows = top + fr * (bottom - top)
    lo, hi, f = _axis_weights(arr.shape[1], out_w)
    fc = f.reshape((1, -1) + (1,) * (arr.ndim - 2))
    left, right = rows[:, lo], rows[:, hi]
    return left + fc * (right - left)


def resize_normalize(sample: ImageSample, size: int = 256) -> ImageSample:
    """Scale pixels to [0, 1] and resize image (and mask, kept soft) to ``size`` x ``size``."""
    if sample.pixels.size == 0:
        raise ValueError(f"sample {sample.id!r} has a zero-sized image")
    pixels = np.clip(resize_bilinear(to_unit(sample.pixels), size, size), 0.0, 1.0)
    mask = None
    if sample.mask is not None:
        mask = np.clip(resize_bilinear(to_unit(sample.mask), size, size), 0.0, 1.0)
    return replace(sample, pixels=pixels, mask=mask)


@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg: float = 15.0
    width_shift_frac: float = 0.2
    height_shift_frac: float = 0.0
    zoom_frac: float = 0.2
    horizontal_flip: bool = True
    vertical_flip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.rotation_deg < 0:
            raise ValueError("rotation_deg must be >= 0")
        for name in ("width_shift_frac", "height_shift_frac", "zoom_frac"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")

    @classmethod
    def disabled(cls, seed: int = 0) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0, False, False, seed)


@dataclass(frozen=True)
class AugmentParams:
    """One concrete draw: angle in degrees, shifts as fractions of width/height, zoom factor."""

    angle: float = 0.0
    shift_x: float = 0.0
    shift_y: float = 0.0
    zoom: float = 1.0
    hflip: bool = False
    vflip: bool = False

    @property
    def is_identity(self) -> bool:
        return self.angle == 0 and self.shift_x == 0 and self.shift_y == 0 and self.zoom == 1 \
            and not self.hflip and not self.vflip


def augment_stream(seed: int, sample_id: str, epoch: int = 0, draw: int = 0) -> np.random.Generator:
    """RNG keyed by (seed, id, epoch, draw) so results do not depend on scheduling."""
    digest = int.from_bytes(hashlib.blake2b(sample_id.encode("utf-8"), digest_size=8).digest(), "little")
    return np.random.default_rng([seed, digest, epoch, draw])


def sample_augment_params(config: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    # every draw is consumed even when disabled so enabling one transform does not shift the others
    angle = rng.uniform(-1.0, 1.0) * config.rotation_deg
    sx = rng.uniform(-1.0, 1.0) * config.width_shift_frac
    sy = rng.uniform(-1.0, 1.0) * config.height_shift_frac
    zoom = 1.0 + rng.uniform(-1.0, 1.0) * config.zoom_frac
    hflip = bool(rng.random() < 0.5) and config.horizontal_flip
    vflip = bool(rng.random() < 0.5) and config.vertical_flip
    return AugmentParams(angle, sx, sy, zoom, hflip, vflip)


def affine_matrix(params: AugmentParams, h: int, w: int) -> tuple:
    """Output->input (row, col) mapping for rotation about the centre, shift, then zoom.

    The forward map is ``p_out = c + zoom * R(angle) @ (p_in - c) + t``;
    returned is its inverse as ``(matrix, offset)`` in the form
    :func:`scipy.ndimage.affine_transform` expects.
    """
    theta = math.radians(params.angle)
    cos, sin = math.cos(theta), math.sin(theta)
    # rows grow downward, so this rotates counter-clockwise on screen
    rot = np.array([[cos, -sin], [sin, cos]])
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    shift = np.array([params.shift_y * h, params.shift_x * w])
    inv = rot.T / params.zoom
    offset = centre - inv @ (centre + shift)
    return inv, offset


def warp(arr: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Apply ``params`` to an H x W or H x W x C array with bilinear sampling and edge fill."""
    out = arr.astype(np.float32, copy=True)
    if params.angle != 0 or params.shift_x != 0 or params.shift_y != 0 or params.zoom != 1:
        matrix, offset = affine_matrix(params, arr.shape[0], arr.shape[1])
        if out.ndim == 2:
            out = ndimage.affine_transform(out, matrix, offset, order=1, mode="nearest")
        else:
            out = np.stack([ndimage.affine_transform(out[:, :, c], matrix, offset, order=1, mode="nearest")
                            for c in range(out.shape[2])], axis=2)
    if params.hflip:
        out = out[:, ::-1]
    if params.vflip:
        out = out[::-1]
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0))


def apply_augment(sample: ImageSample, params: AugmentParams) -> ImageSample:
    if params.is_identity:
        return sample
    mask = warp(sample.mask, params) if sample.mask is not None else None
    return replace(sample, pixels=warp(sample.pixels, params), mask=mask)


def augment(sample: ImageSample, config: AugmentConfig, rng: Optional[np.random.Generator] = None,
            epoch: int = 0) -> ImageSample:
    """Randomly rotate, shift, zoom and flip a sample (mask gets identical geometry).

    Without an explicit ``rng`` the stream is derived from
    ``(config.seed, sample.id, epoch, sample.copy_index)``.
    """
    if rng is None:
        rng = augment_stream(config.seed, sample.id, epoch, sample.copy_index)
    return apply_augment(sample, sample_augment_params(config, rng))
