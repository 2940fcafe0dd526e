"""Procedural skin-lesion images with exact ground-truth masks.

Benign (label 0) lesions are smooth, medium-brown ellipses; melanoma-like
(label 1) lesions are larger, darker, mottled and have an irregular border.
"""

from __future__ import annotations

from typing import List

import numpy as np

from .samples import ImageSample

SKIN_LO = np.array([0.78, 0.58, 0.48])
SKIN_HI = np.array([0.95, 0.76, 0.66])


def _render(size: int, label: int, rng: np.random.Generator) -> tuple:
    skin = rng.uniform(SKIN_LO, SKIN_HI)
    pixels = np.broadcast_to(skin, (size, size, 3)) + rng.normal(0.0, 0.02, (size, size, 3))

    cy, cx = rng.uniform(0.38, 0.62, size=2) * size
    if label:
        axes = rng.uniform(0.18, 0.28, size=2) * size
        darkness = rng.uniform(0.18, 0.34)
    else:
        axes = rng.uniform(0.11, 0.19, size=2) * size
        darkness = rng.uniform(0.55, 0.72)
    theta = rng.uniform(0.0, np.pi)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / axes[0]
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / axes[1]
    rho = np.hypot(u, v)
    phi = np.arctan2(v, u)
    boundary = np.ones_like(rho)
    if label:
        for k in range(2, 6):
            boundary += rng.uniform(0.04, 0.12) * np.cos(k * phi + rng.uniform(0, 2 * np.pi))
    mask = rho <= boundary

    tint = np.array([1.0, 0.82, 0.75]) * darkness
    lesion = skin * tint
    if label:
        mottling = 1.0 + 0.12 * rng.standard_normal((size, size, 1))
        lesion = lesion * mottling
    pixels = np.where(mask[:, :, None], lesion + rng.normal(0.0, 0.015, (size, size, 3)), pixels)
    return np.clip(pixels, 0.0, 1.0).astype(np.float32), mask.astype(np.float32)


def synth_generate(n: int, image_size: int = 64, seed: int = 0) -> List[ImageSample]:
    """Render ``n`` samples, alternating labels 0/1, deterministically from ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if image_size < 8:
        raise ValueError("image_size must be >= 8")
    samples = []
    for i in range(n):
        label = i % 2
        rng = np.random.default_rng([seed, i])
        pixels, mask = _render(image_size, label, rng)
        samples.append(ImageSample(
            id=f"synth_{i:05d}", pixels=pixels, mask=mask, label=label, source="synthetic",
            meta={"dx": "mel" if label else "nv"},
        ))
    return samples
