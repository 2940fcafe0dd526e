"""Cleaning, task filtering, stratified splitting and class rebalancing."""

from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .samples import ImageSample

HAM_CATEGORIES = ("akiec", "bcc", "bkl", "df", "mel", "nv", "vasc")
MELANOMA = "mel"


@dataclass(frozen=True)
class Removal:
    id: str
    reason: str
    duplicate_of: Optional[str] = None


def dedup_clean(samples: Sequence[ImageSample]) -> Tuple[List[ImageSample], List[Removal]]:
    """Drop exact pixel duplicates (first id kept) and schema-violating samples.

    Returns the kept samples in input order and one :class:`Removal` per drop.
    """
    kept, report = [], []
    seen: Dict[bytes, str] = {}
    for s in samples:
        problems = s.problems()
        if problems:
            report.append(Removal(s.id, "; ".join(problems)))
            continue
        arr = np.ascontiguousarray(s.pixels)
        key = hashlib.sha256(str(arr.shape).encode() + str(arr.dtype).encode() + arr.tobytes()).digest()
        if key in seen:
            report.append(Removal(s.id, "duplicate pixels", duplicate_of=seen[key]))
            continue
        seen[key] = s.id
        kept.append(s)
    return kept, report


def filter_melanoma_task(samples: Sequence[ImageSample], keep_only: bool = False) -> List[ImageSample]:
    """Binarise HAM lesion categories into melanoma (1) vs everything else (0).

    Samples whose ``meta["dx"]`` is missing or not a HAM category are dropped.
    With ``keep_only`` only melanoma samples are returned.
    """
    out = []
    for s in samples:
        dx = s.meta.get("dx", "").strip().lower()
        if dx not in HAM_CATEGORIES:
            continue
        label = int(dx == MELANOMA)
        if keep_only and not label:
            continue
        out.append(replace(s, label=label))
    return out


@dataclass(frozen=True)
class SplitSpec:
    ratios: Tuple[int, ...] = (75, 25)
    stratify_by_label: bool = True
    seed: int = 0
    names: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        if any(r <= 0 or int(r) != r for r in self.ratios) or sum(self.ratios) != 100:
            raise ValueError(f"ratios must be positive integer percents summing to 100, got {self.ratios}")
        if self.names is not None and len(self.names) != len(self.ratios):
            raise ValueError("names and ratios must have the same length")

    @classmethod
    def parse(cls, text: str, **kw) -> "SplitSpec":
        """``"70-15-15"`` or ``"80:20"`` style."""
        parts = text.replace(":", "-").replace("/", "-").split("-")
        try:
            ratios = tuple(int(p) for p in parts)
        except ValueError:
            raise ValueError(f"cannot parse split {text!r}") from None
        return cls(ratios=ratios, **kw)

    def subset_names(self) -> Tuple[str, ...]:
        if self.names:
            return self.names
        return {2: ("train", "test"), 3: ("train", "val", "test")}.get(
            len(self.ratios), tuple(f"part{i}" for i in range(len(self.ratios))))


def _allocate(n: int, ratios: Sequence[int]) -> List[int]:
    # largest-remainder apportionment; ties go to the earlier subset
    exact = [n * r / 100 for r in ratios]
    counts = [int(e) for e in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _sort_key(s) -> tuple:
    return s.id, getattr(s, "copy_index", 0)


def stratified_split(samples: Sequence[ImageSample], spec: SplitSpec) -> Dict[str, List[ImageSample]]:
    """Partition samples into disjoint subsets with per-class proportions matching ``spec``.

    Each class is sorted by id and shuffled with its own seeded stream, so the
    result does not depend on input order.

    Raises:
        ValueError: unlabeled samples when stratifying, or a class smaller than
            the number of subsets.
    """
    groups: Dict[object, list] = defaultdict(list)
    for s in samples:
        if spec.stratify_by_label:
            if s.label is None:
                raise ValueError(f"sample {s.id!r} has no label; cannot stratify")
            groups[s.label].append(s)
        else:
            groups[None].append(s)
    names = spec.subset_names()
    out: Dict[str, List[ImageSample]] = {name: [] for name in names}
    for key in sorted(groups, key=lambda k: (k is None, k)):
        members = sorted(groups[key], key=_sort_key)
        if len(members) < len(names):
            raise ValueError(f"class {key!r} has {len(members)} samples, fewer than {len(names)} subsets")
        stream = np.random.default_rng([spec.seed, -1 if key is None else int(key) + 1])
        perm = stream.permutation(len(members))
        start = 0
        for name, count in zip(names, _allocate(len(members), spec.ratios)):
            out[name].extend(members[i] for i in perm[start : start + count])
            start += count
    for name in names:
        out[name].sort(key=_sort_key)
    return out


def rebalance(samples: Sequence, per_class_target: int, seed: int = 0) -> list:
    """Resample both classes to exactly ``per_class_target`` samples each.

    Classes larger than the target are undersampled uniformly without
    replacement. Smaller classes keep every original and add duplicates drawn
    with replacement; each duplicate gets ``augment=True`` and a distinct
    ``copy_index``. Works on anything with ``id`` and ``label`` attributes that
    :func:`dataclasses.replace` accepts.

    Raises:
        ValueError: a class is absent or the target is below 1.
    """
    if per_class_target < 1:
        raise ValueError("per_class_target must be >= 1")
    groups: Dict[int, list] = defaultdict(list)
    for s in samples:
        groups[s.label].append(s)
    for cls in (0, 1):
        if not groups.get(cls):
            raise ValueError(f"class {cls} is missing; cannot rebalance")
    extra = sorted(set(groups) - {0, 1}, key=repr)
    if extra:
        raise ValueError(f"unexpected labels {extra}")
    out = []
    for cls in (0, 1):
        members = sorted(groups[cls], key=_sort_key)
        stream = np.random.default_rng([seed, cls])
        n = len(members)
        if n >= per_class_target:
            picks = np.sort(stream.choice(n, size=per_class_target, replace=False))
            out.extend(members[i] for i in picks)
        else:
            out.extend(members)
            draws = stream.integers(0, n, size=per_class_target - n)
            copies: Dict[str, int] = defaultdict(int)
            for i in draws:
                src = members[i]
                copies[src.id] += 1
                out.append(replace(src, augment=True, copy_index=copies[src.id]))
    return out


def stratified_sample(samples: Sequence[ImageSample], n: int, seed: int = 0) -> List[ImageSample]:
    """Draw ``n`` labelled samples with class proportions preserved (largest remainder)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > len(samples):
        raise ValueError(f"requested {n} samples but only {len(samples)} available")
    groups: Dict[int, list] = defaultdict(list)
    for s in samples:
        if s.label is None:
            raise ValueError(f"sample {s.id!r} has no label")
        groups[s.label].append(s)
    keys = sorted(groups)
    exact = [n * len(groups[k]) / len(samples) for k in keys]
    counts = [int(e) for e in exact]
    for i in sorted(range(len(keys)), key=lambda i: (-(exact[i] - counts[i]), i))[: n - sum(counts)]:
        counts[i] += 1
    out = []
    for k, count in zip(keys, counts):
        members = sorted(groups[k], key=_sort_key)
        picks = np.random.default_rng([seed, int(k) + 1]).choice(len(members), size=count, replace=False)
        out.extend(members[i] for i in np.sort(picks))
    return sorted(out, key=_sort_key)
