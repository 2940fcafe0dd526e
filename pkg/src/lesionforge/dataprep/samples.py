"""Image samples and on-disk dataset layouts."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import numpy as np
from PIL import Image

SOURCES = ("ham10000", "isic2020", "isic2019", "synthetic")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MASK_SUFFIX = "_segmentation.png"
LAYOUT_SOURCE = {"isic": "isic2020", "ham": "ham10000", "hybrid": "synthetic"}


class DatasetError(ValueError):
    """Unreadable, inconsistent or duplicated dataset content."""


@dataclass
class ImageSample:
    """One image with optional mask and binary label.

    ``pixels`` is H x W x C float32 in [0, 1]; ``mask`` is H x W. ``augment`` is
    set on oversampled duplicates so the training loop knows to perturb them,
    and ``copy_index`` tells those duplicates apart for RNG stream derivation.
    """

    id: str
    pixels: np.ndarray
    mask: Optional[np.ndarray] = None
    label: Optional[int] = None
    source: str = "synthetic"
    meta: Dict[str, str] = field(default_factory=dict)
    augment: bool = False
    copy_index: int = 0

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.mask is not None and self.mask.shape != self.pixels.shape[:2]:
            raise ValueError(f"mask shape {self.mask.shape} does not match image {self.pixels.shape[:2]}")

    @property
    def shape(self) -> tuple:
        return self.pixels.shape

    def problems(self) -> List[str]:
        """Schema violations; an empty list means the sample is clean."""
        out = []
        if self.pixels.size == 0:
            out.append("empty image")
        elif not (np.all(np.isfinite(self.pixels)) and self.pixels.min() >= 0 and self.pixels.max() <= 1):
            out.append("pixel values outside [0,1]")
        if self.mask is not None and self.mask.size and not (self.mask.min() >= 0 and self.mask.max() <= 1):
            out.append("mask values outside [0,1]")
        if self.label is not None and self.label not in (0, 1):
            out.append(f"label {self.label!r} not in {{0,1}}")
        return out


def to_unit(arr: np.ndarray) -> np.ndarray:
    """Convert 8-bit (or already-float) pixel data to float32 in [0, 1]."""
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    if arr.dtype.kind in "ui":
        return arr.astype(np.float32) / float(np.iinfo(arr.dtype).max)
    return np.clip(arr.astype(np.float32), 0.0, 1.0)


def quantize(arr: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8, rounding half up."""
    return np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return to_unit(np.asarray(im.convert("RGB")))
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def read_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            gray = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read mask {path}: {exc}") from exc
    return (gray >= 128).astype(np.float32)


def write_png(arr: np.ndarray, path: Path) -> None:
    data = quantize(arr)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path, format="PNG")


def _index_images(image_dir: Path) -> Dict[str, Path]:
    if not image_dir.is_dir():
        raise DatasetError(f"image directory {image_dir} does not exist")
    found: Dict[str, Path] = {}
    for path in sorted(image_dir.iterdir()):
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        if path.stem in found:
            raise DatasetError(f"duplicate image id {path.stem!r} ({found[path.stem].name}, {path.name})")
        found[path.stem] = path
    return found


def _read_csv(path: Path, columns: tuple) -> List[dict]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not set(columns) <= set(reader.fieldnames):
                raise DatasetError(f"{path} must have header {','.join(columns)}, got {reader.fieldnames}")
            return list(reader)
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc


def _read_labels(path: Path) -> Dict[str, int]:
    labels: Dict[str, int] = {}
    for row in _read_csv(path, ("image_name", "target")):
        name = row["image_name"].strip()
        if name in labels:
            raise DatasetError(f"duplicate image id {name!r} in {path.name}")
        try:
            labels[name] = int(row["target"])
        except ValueError:
            raise DatasetError(f"non-integer target {row['target']!r} for {name!r}") from None
    return labels


def load_dataset(root, layout: str = "isic", source: Optional[str] = None) -> List[ImageSample]:
    """Load a dataset directory.

    Layouts:
        ``isic``: ``images/*.png`` plus ``labels.csv`` (``image_name,target``);
            only images listed in the CSV are loaded.
        ``ham``: ``images/<id>.png`` with ``masks/<id>_segmentation.png`` and an
            optional ``metadata.csv`` (``image_id,dx``) stored in ``meta["dx"]``.
        ``hybrid``: both of the above (what :func:`write_dataset` produces).

    Returns:
        Samples sorted by id.

    Raises:
        DatasetError: unreadable files, CSV rows naming missing images,
            duplicate ids, or an unknown layout.
    """
    if layout not in LAYOUT_SOURCE:
        raise DatasetError(f"unknown layout {layout!r}; expected one of {sorted(LAYOUT_SOURCE)}")
    root = Path(root)
    source = source or LAYOUT_SOURCE[layout]
    images = _index_images(root / "images")

    labels: Dict[str, int] = {}
    if layout in ("isic", "hybrid"):
        labels = _read_labels(root / "labels.csv")
        missing = sorted(set(labels) - set(images))
        if missing:
            raise DatasetError(f"labels.csv references missing image(s): {', '.join(missing[:5])}")
    ids = sorted(labels) if layout == "isic" else sorted(images)

    dx: Dict[str, str] = {}
    if layout in ("ham", "hybrid") and (root / "metadata.csv").exists():
        for row in _read_csv(root / "metadata.csv", ("image_id", "dx")):
            dx[row["image_id"].strip()] = row["dx"].strip()

    samples = []
    for sid in ids:
        pixels = read_image(images[sid])
        mask = None
        if layout in ("ham", "hybrid"):
            mpath = root / "masks" / f"{sid}{MASK_SUFFIX}"
            if mpath.exists():
                mask = read_mask(mpath)
                if mask.shape != pixels.shape[:2]:
                    raise DatasetError(f"mask for {sid!r} is {mask.shape}, image is {pixels.shape[:2]}")
        meta = {"dx": dx[sid]} if sid in dx else {}
        samples.append(ImageSample(sid, pixels, mask=mask, label=labels.get(sid), source=source, meta=meta))
    return samples


def write_dataset(samples: Iterable[ImageSample], root, layout: str = "hybrid") -> None:
    """Write samples in the given layout (the inverse of :func:`load_dataset`)."""
    if layout not in LAYOUT_SOURCE:
        raise DatasetError(f"unknown layout {layout!r}")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    samples = sorted(samples, key=lambda s: s.id)
    seen = set()
    for s in samples:
        if s.id in seen:
            raise DatasetError(f"duplicate image id {s.id!r}")
        seen.add(s.id)
        write_png(s.pixels, root / "images" / f"{s.id}.png")
        if layout in ("ham", "hybrid") and s.mask is not None:
            write_png(s.mask, root / "masks" / f"{s.id}{MASK_SUFFIX}")
    if layout in ("isic", "hybrid"):
        with open(root / "labels.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_name", "target"])
            for s in samples:
                if s.label is None:
                    raise DatasetError(f"sample {s.id!r} has no label")
                w.writerow([s.id, s.label])
    if layout in ("ham", "hybrid") and any("dx" in s.meta for s in samples):
        with open(root / "metadata.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "dx"])
            for s in samples:
                if "dx" in s.meta:
                    w.writerow([s.id, s.meta["dx"]])
