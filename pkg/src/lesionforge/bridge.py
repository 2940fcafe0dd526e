"""Blend segmentation masks over the original images before classification."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image

from .dataprep.samples import quantize
from .tensor import Tensor, no_grad
from .unet import UNetModel, binarize_mask, unet_forward

BLEND_MODES = ("additive", "composite")
MASK_MODES = ("binarized", "soft")


@dataclass(frozen=True)
class BridgeConfig:
    """``alpha`` is the overlay transparency; ``highlight`` the per-channel overlay colour.

    ``blend="additive"`` adds ``alpha * mask * highlight`` and clamps;
    ``blend="composite"`` mixes ``(1 - alpha*mask) * image + alpha*mask * highlight``.
    """

    alpha: float = 0.5
    mask_mode: str = "binarized"
    threshold: float = 0.5
    highlight: Tuple[float, float, float] = (1.0, 0.0, 0.0)
    blend: str = "additive"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")
        if self.blend not in BLEND_MODES:
            raise ValueError(f"blend must be one of {BLEND_MODES}")
        if not all(0.0 <= h <= 1.0 for h in self.highlight):
            raise ValueError("highlight values must be in [0, 1]")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["highlight"] = list(self.highlight)
        return d


def apply_bridge(image: np.ndarray, mask: np.ndarray, config: BridgeConfig = BridgeConfig()) -> np.ndarray:
    """Overlay ``mask`` on an H x W x 3 ``image``; pixels off the mask come back unchanged."""
    if image.ndim != 3 or image.shape[2] != len(config.highlight):
        raise ValueError(f"image must be H x W x {len(config.highlight)}, got {image.shape}")
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    if config.alpha == 0.0:
        return image.copy()
    m = binarize_mask(mask, config.threshold) if config.mask_mode == "binarized" else mask
    weight = (config.alpha * m).astype(image.dtype)[:, :, None]
    colour = np.asarray(config.highlight, dtype=image.dtype)
    if config.blend == "additive":
        blended = np.clip(image + weight * colour, 0.0, 1.0)
    else:
        blended = np.clip((1 - weight) * image + weight * colour, 0.0, 1.0)
    # keep off-mask pixels bit-identical
    return np.where(weight > 0, blended, image).astype(image.dtype)


def predict_masks(seg_model: UNetModel, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Soft masks (N x H x W) for an N x H x W x 3 image stack, in inference mode."""
    if seg_model.training:
        raise ValueError("segmentation model must be frozen (eval mode)")
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            chunk = np.ascontiguousarray(images[start : start + batch_size].transpose(0, 3, 1, 2))
            out.append(unet_forward(seg_model, Tensor(chunk)).data[:, 0])
    return np.concatenate(out, axis=0)


def segment_and_blend(seg_model: UNetModel, images: np.ndarray, config: BridgeConfig = BridgeConfig(),
                      return_masks: bool = False):
    """Segment each image with the frozen U-Net and blend its mask back in."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    masks = predict_masks(seg_model, images)
    blended = np.stack([apply_bridge(img, m, config) for img, m in zip(images, masks)])
    return (blended, masks) if return_masks else blended


def triptych(image: np.ndarray, mask: np.ndarray, blended: np.ndarray) -> np.ndarray:
    """Original | mask (grey) | blended, quantised to uint8."""
    grey = np.repeat(np.asarray(mask, dtype=np.float32)[:, :, None], 3, axis=2)
    return np.concatenate([quantize(image), quantize(grey), quantize(blended)], axis=1)


def export_overlay(image: np.ndarray, mask: np.ndarray, blended: np.ndarray, path) -> Path:
    """Write the side-by-side triptych PNG and return its path."""
    if not (image.shape == blended.shape and image.shape[:2] == mask.shape):
        raise ValueError("image, mask and blended must share spatial dims")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(triptych(image, mask, blended)).save(path, format="PNG")
    return path


def read_triptych(path) -> tuple:
    """Split a triptych PNG back into (image, mask, blended) floats in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB")).astype(np.float32) / 255.0
    w = arr.shape[1] // 3
    return arr[:, :w], arr[:, w : 2 * w, 0], arr[:, 2 * w :]
