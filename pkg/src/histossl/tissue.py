"""Tissue/background segmentation for slide overview images.

Tissue detection runs on a low-magnification RGB rendering of the slide:
convert to grayscale, pick a global threshold by Otsu's criterion, and
call the darker side tissue (H&E tissue is stained, background is glass,
i.e. near-white).
"""

from __future__ import annotations

import numpy as np

__all__ = ["rgb_to_gray", "otsu_threshold", "compute_tissue_mask"]


def rgb_to_gray(image: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma of an 8-bit RGB image, as float64 in [0, 255]."""
    image = np.asarray(image)
    if image.ndim == 2:
        return image.astype(np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected HxWx3 RGB image, got shape {image.shape}")
    r, g, b = image[..., 0], image[..., 1], image[..., 2]
    return 0.299 * r + 0.587 * g + 0.114 * b


def otsu_threshold(gray: np.ndarray) -> float | None:
    """Threshold maximizing between-class variance of the intensity histogram.

    The split at threshold ``t`` is ``gray <= t`` versus ``gray > t`` for
    integer t in [0, 255].  When several thresholds tie (e.g. a histogram
    with an empty gap between two modes), the midpoint of the maximizing
    range is returned, so the boundary sits between the modes rather than
    hugging one of them.

    Returns None for a degenerate single-intensity image, where no split
    separates anything.
    """
    gray = np.asarray(gray)
    if gray.size == 0:
        raise ValueError("empty image")
    values = np.clip(np.round(gray), 0, 255).astype(np.int64)
    hist = np.bincount(values.ravel(), minlength=256).astype(np.float64)
    total = hist.sum()

    if np.count_nonzero(hist) < 2:
        return None

    # Cumulative class weights and means for every split point.
    w0 = np.cumsum(hist)
    w1 = total - w0
    cum_mean = np.cumsum(hist * np.arange(256))
    grand_mean = cum_mean[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = cum_mean / w0
        mu1 = (grand_mean - cum_mean) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between = np.nan_to_num(between, nan=-1.0)

    best = np.flatnonzero(between == between.max())
    return float(best[0] + best[-1]) / 2.0


def compute_tissue_mask(low_mag_image: np.ndarray) -> np.ndarray:
    """Binary tissue mask of a low-magnification RGB image.

    Tissue is the darker-than-threshold side of the Otsu split of the
    grayscale histogram.  A degenerate single-intensity image yields an
    all-background mask rather than an error.
    """
    image = np.asarray(low_mag_image)
    if image.size == 0:
        raise ValueError("empty image")
    gray = rgb_to_gray(image)
    threshold = otsu_threshold(gray)
    if threshold is None:
        return np.zeros(gray.shape, dtype=bool)
    return gray <= threshold
