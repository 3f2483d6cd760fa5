"""Patch sampling from slides: unsupervised grids, supervised class-capped
datasets, and nested slide-subset folds.

All sampling is a pure function of its inputs and a seed.  Per-slide
random streams are derived from (seed, slide_id), so sampling many
slides in parallel yields the same result as a sequential pass.
"""

from __future__ import annotations

import zlib
from collections import defaultdict
from typing import Mapping, Sequence

import numpy as np

from .manifest import Manifest, Patch
from .slides import BACKGROUND, SlideSource

__all__ = [
    "sample_unsupervised_patches",
    "build_supervised_dataset",
    "make_slide_subsets",
]


def _slide_rng(seed: int, slide_id: str, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(slide_id.encode()), salt])


def _grid_positions(width: int, height: int, patch_size: int, stride: int) -> list[tuple[int, int]]:
    xs = range(0, width - patch_size + 1, stride)
    ys = range(0, height - patch_size + 1, stride)
    return [(x, y) for y in ys for x in xs]


def _box_coverage(summed: np.ndarray, x0: float, y0: float, x1: float, y1: float) -> float:
    """Mean of a binary mask over a box, via its integral image."""
    h, w = summed.shape[0] - 1, summed.shape[1] - 1
    xi0, yi0 = int(np.floor(x0)), int(np.floor(y0))
    xi1, yi1 = int(np.ceil(x1)), int(np.ceil(y1))
    xi0, yi0 = max(xi0, 0), max(yi0, 0)
    xi1, yi1 = min(xi1, w), min(yi1, h)
    if xi1 <= xi0 or yi1 <= yi0:
        return 0.0
    total = (
        summed[yi1, xi1] - summed[yi0, xi1] - summed[yi1, xi0] + summed[yi0, xi0]
    )
    return float(total) / ((yi1 - yi0) * (xi1 - xi0))


def sample_unsupervised_patches(
    slide: SlideSource,
    mask: np.ndarray,
    mask_mpp: float,
    *,
    patch_size: int = 256,
    mpp: float = 0.5,
    max_per_slide: int = 1000,
    min_coverage: float = 0.5,
    seed: int = 0,
) -> list[Patch]:
    """Grid-sample tissue patches without overlap, capped per slide.

    The candidate grid is axis-aligned with step ``patch_size`` at the
    sampling resolution; a cell qualifies when the (coarser) tissue mask
    covers at least ``min_coverage`` of its footprint.  When more cells
    qualify than ``max_per_slide``, a uniform random subset of exactly
    that size is drawn from a stream derived from (seed, slide_id).
    No tissue candidates yields an empty list, not an error.
    """
    if max_per_slide < 1:
        raise ValueError("max_per_slide must be >= 1")
    if not 0 < min_coverage <= 1:
        raise ValueError("min_coverage must be in (0, 1]")
    mask = np.asarray(mask).astype(bool)
    width, height = slide.dims_at(mpp)
    scale = mpp / mask_mpp  # patch coords -> mask coords
    summed = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(mask, axis=0), axis=1, out=summed[1:, 1:])

    candidates = []
    for x, y in _grid_positions(width, height, patch_size, patch_size):
        cov = _box_coverage(
            summed, x * scale, y * scale, (x + patch_size) * scale, (y + patch_size) * scale
        )
        if cov >= min_coverage:
            candidates.append((x, y))

    if len(candidates) > max_per_slide:
        rng = _slide_rng(seed, slide.slide_id)
        keep = rng.choice(len(candidates), size=max_per_slide, replace=False)
        candidates = [candidates[i] for i in sorted(keep)]

    return [
        Patch(
            patch_id=f"{slide.slide_id}_x{x}_y{y}",
            slide_id=slide.slide_id,
            x=x,
            y=y,
            mpp=mpp,
            width=patch_size,
            height=patch_size,
        )
        for x, y in candidates
    ]


def _majority_label(
    summed_per_class: list[np.ndarray],
    x0: float,
    y0: float,
    x1: float,
    y1: float,
    min_class_coverage: float,
) -> int | None:
    coverages = [_box_coverage(s, x0, y0, x1, y1) for s in summed_per_class]
    best = int(np.argmax(coverages))
    if coverages[best] >= min_class_coverage:
        return best
    return None


def build_supervised_dataset(
    slides: Sequence[tuple[SlideSource, np.ndarray, float]],
    split_assignment: Mapping[str, str],
    class_names: Sequence[str],
    *,
    patch_size: int = 256,
    mpp: float = 0.5,
    per_class_cap: int = 75_000,
    val_per_class: int = 700,
    test_per_class: int = 3700,
    overlap_fraction: float = 0.0,
    min_class_coverage: float = 0.5,
    seed: int = 0,
) -> Manifest:
    """Build a class-capped, slide-split supervised patch manifest.

    ``slides`` pairs each source with its pixel label mask and the mpp
    that mask was drawn at.  Splits are assigned per slide (a slide
    never feeds two splits).  A grid candidate becomes a patch when one
    class covers at least ``min_class_coverage`` of its mask footprint;
    the patch takes that majority class as label.  Training keeps
    ``min(per_class_cap, available)`` patches per class; val/test keep
    exactly their per-class targets when supply allows, all available
    otherwise.  A class with no candidates in a split that demands it is
    an error naming the class.
    """
    n_classes = len(class_names)
    if n_classes < 2:
        raise ValueError("need at least two classes")
    stride = max(int(round(patch_size * (1.0 - overlap_fraction))), 1)

    seen_ids: set[str] = set()
    for slide, _, _ in slides:
        if slide.slide_id in seen_ids:
            raise ValueError(f"slide {slide.slide_id!r} appears twice")
        seen_ids.add(slide.slide_id)
        split = split_assignment.get(slide.slide_id)
        if split not in ("train", "val", "test"):
            raise ValueError(f"slide {slide.slide_id!r} has no valid split assignment")

    per_split_class: dict[tuple[str, int], list[Patch]] = defaultdict(list)
    for slide, label_mask, mask_mpp in slides:
        split = split_assignment[slide.slide_id]
        label_mask = np.asarray(label_mask)
        scale = mpp / mask_mpp
        summed_per_class = []
        for c in range(n_classes):
            binary = label_mask == c
            s = np.zeros((binary.shape[0] + 1, binary.shape[1] + 1), dtype=np.float64)
            np.cumsum(np.cumsum(binary, axis=0), axis=1, out=s[1:, 1:])
            summed_per_class.append(s)
        width, height = slide.dims_at(mpp)
        for x, y in _grid_positions(width, height, patch_size, stride):
            label = _majority_label(
                summed_per_class,
                x * scale,
                y * scale,
                (x + patch_size) * scale,
                (y + patch_size) * scale,
                min_class_coverage,
            )
            if label is None:
                continue
            per_split_class[(split, label)].append(
                Patch(
                    patch_id=f"{slide.slide_id}_x{x}_y{y}",
                    slide_id=slide.slide_id,
                    x=x,
                    y=y,
                    mpp=mpp,
                    width=patch_size,
                    height=patch_size,
                    label=label,
                    split=split,
                )
            )

    targets = {"train": per_class_cap, "val": val_per_class, "test": test_per_class}
    records: list[Patch] = []
    for split, target in targets.items():
        if target <= 0:
            continue
        for c in range(n_classes):
            pool = per_split_class.get((split, c), [])
            if not pool:
                raise ValueError(
                    f"class {class_names[c]!r} has no candidate patches in split {split!r}"
                )
            take = min(target, len(pool))
            if take < len(pool):
                rng = np.random.default_rng([int(seed), {"train": 0, "val": 1, "test": 2}[split], c])
                keep = rng.choice(len(pool), size=take, replace=False)
                pool = [pool[i] for i in sorted(keep)]
            records.extend(pool)

    return Manifest(records, "supervised", list(class_names))


def make_slide_subsets(
    manifest: Manifest,
    subset_sizes: Sequence[int],
    n_folds: int,
    seed: int = 0,
) -> dict[tuple[int, int], Manifest]:
    """Nested random slide subsets of the training split, per fold.

    Within one fold the subsets are prefixes of a single shuffled slide
    order, so the size-s1 set is a strict subset of the size-s2 set for
    s1 < s2.  Folds draw independent orders from (seed, fold).  Returns
    ``{(fold, size): manifest}`` where each manifest holds all patches
    of the selected slides, tagged with the fold index.
    """
    if n_folds < 1:
        raise ValueError("n_folds must be >= 1")
    sizes = sorted(set(int(s) for s in subset_sizes))
    if not sizes or sizes[0] < 1:
        raise ValueError("subset sizes must be positive")
    train = manifest.for_split("train") if any(r.split for r in manifest.records) else manifest
    slide_ids = train.slide_ids()
    if sizes[-1] > len(slide_ids):
        raise ValueError(
            f"largest subset size {sizes[-1]} exceeds {len(slide_ids)} training slides"
        )
    out: dict[tuple[int, int], Manifest] = {}
    for fold in range(n_folds):
        rng = np.random.default_rng([int(seed), fold])
        order = [slide_ids[i] for i in rng.permutation(len(slide_ids))]
        for size in sizes:
            out[(fold, size)] = train.for_slides(order[:size], fold=fold)
    return out
