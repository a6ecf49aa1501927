"""Mean-stroke reconstruction.

Each skeleton patch is classified, swapped for its cluster's mean stroke
scaled by the cluster weight, and the substitutes are summed back onto the
canvas. The sum is divided by the square root of the per-pixel coverage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classifier import SvmEnsemble, predict_batch
from .codebook import StrokeCodebook, extract_patches, hog_batch, patch_centers
from .raster import binarize, resize_256, skeletonize


@dataclass(frozen=True)
class Reconstruction:
    values: np.ndarray  # R, float
    rendered: np.ndarray  # uint8, ink dark
    counts: np.ndarray  # C
    blank: bool = False


def weighted_patch(cluster_id: int, codebook: StrokeCodebook) -> np.ndarray:
    if codebook.weights is None:
        raise ValueError("codebook weights have not been computed")
    if not 0 <= cluster_id < codebook.k:
        raise ValueError(f"cluster {cluster_id} outside [0, {codebook.k})")
    return codebook.weights[cluster_id] * codebook.mean_strokes[cluster_id]


def count_matrix(centers, shape, size: int = 31) -> np.ndarray:
    """Coverage count of the clipped ``size x size`` windows around ``centers``."""
    half = size // 2
    height, width = shape
    counts = np.zeros((height + 2 * half, width + 2 * half), dtype=np.int64)
    for x, y in np.asarray(centers, dtype=np.int64).reshape(-1, 2):
        counts[y:y + size, x:x + size] += 1
    return counts[half:half + height, half:half + width]


def accumulate(centers, labels, codebook: StrokeCodebook, shape):
    """Sum the weighted mean strokes at their centers; returns ``(sum, counts)``.

    Windows are clipped to the frame: out-of-frame pixels feed neither the
    sum nor the counts.
    """
    size = codebook.patch_size
    half = size // 2
    height, width = shape
    total = np.zeros((height + 2 * half, width + 2 * half))
    counts = np.zeros(total.shape, dtype=np.int64)
    scaled = codebook.weights[:, None, None] * codebook.mean_strokes
    for (x, y), j in zip(np.asarray(centers, dtype=np.int64).reshape(-1, 2), labels):
        total[y:y + size, x:x + size] += scaled[j]
        counts[y:y + size, x:x + size] += 1
    crop = (slice(half, half + height), slice(half, half + width))
    return total[crop], counts[crop]


def normalize_overlap(total: np.ndarray, counts: np.ndarray) -> np.ndarray:
    out = np.zeros_like(total, dtype=np.float64)
    covered = counts > 0
    out[covered] = total[covered] / np.sqrt(counts[covered])
    return out


def render(values: np.ndarray) -> np.ndarray:
    """Map ``max(R)`` to black and 0 to white, linearly."""
    peak = values.max() if values.size else 0.0
    if peak <= 0:
        return np.full(values.shape, 255, dtype=np.uint8)
    return np.rint(255.0 * (1.0 - values / peak)).astype(np.uint8)


def heatmap(values: np.ndarray, cmap: str = "inferno") -> np.ndarray:
    """RGB rendering of R on a perceptual ramp, bright where R is large."""
    from matplotlib import colormaps

    peak = values.max() if values.size else 0.0
    norm = values / peak if peak > 0 else np.zeros_like(values)
    rgba = colormaps[cmap](norm)
    return np.rint(255.0 * rgba[..., :3]).astype(np.uint8)


def reconstruct(img: np.ndarray, codebook: StrokeCodebook, ensemble: SvmEnsemble,
                threshold: int = 128) -> Reconstruction:
    if codebook.weights is None:
        raise ValueError("codebook weights have not been computed")
    if codebook.k != ensemble.k:
        raise ValueError(f"codebook k={codebook.k} but ensemble k={ensemble.k}")
    if codebook.hog.dim(codebook.patch_size) != ensemble.dim:
        raise ValueError("codebook HOG configuration does not match the ensemble")
    gray = resize_256(np.asarray(img, dtype=np.uint8))
    skel = skeletonize(binarize(gray, threshold))
    centers = patch_centers(skel)
    shape = gray.shape
    if len(centers) == 0:
        zeros = np.zeros(shape)
        return Reconstruction(zeros, render(zeros), np.zeros(shape, dtype=np.int64), blank=True)
    patches = extract_patches(skel, centers, codebook.patch_size)
    labels = predict_batch(ensemble, hog_batch(patches, codebook.hog))
    total, counts = accumulate(centers, labels, codebook, shape)
    values = normalize_overlap(total, counts)
    return Reconstruction(values, render(values), counts)
