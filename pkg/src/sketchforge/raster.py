"""Raster primitives shared by both augmentations.

Grayscale rasters are ``uint8`` arrays of shape ``(height, width)``; ink masks
are ``bool`` arrays of the same shape with ``True`` marking stroke pixels.
Points handed to and from the curve code are ``(x, y)`` pairs, i.e. column
first, while arrays are indexed ``[y, x]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

SIZE = 256

_EIGHT = np.ones((3, 3), dtype=bool)
_FOUR = ndimage.generate_binary_structure(2, 1)

# (dy, dx) of the 8-neighbourhood, clockwise from north; bit i of a
# neighbourhood code is set when neighbour i is ink.
NEIGHBOR_OFFSETS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


class RasterError(ValueError):
    """Raised when an image cannot be decoded into a usable raster."""


@dataclass(frozen=True)
class Skeleton:
    mask: np.ndarray
    euler_before: int
    euler_after: int


@dataclass(frozen=True)
class CurveTrace:
    points: np.ndarray  # (n, 2) int, (x, y)
    closed: bool
    dropped: int = 0  # pixels of the component the greedy walk never reached

    def __len__(self):
        return len(self.points)


def load_gray(path) -> np.ndarray:
    """Decode an image file into an 8-bit luminance raster.

    Transparent pixels are composited over white first so that PNG sketches
    saved with an alpha background keep dark-on-light polarity.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("RGBA", "LA") or (im.mode == "P" and "transparency" in im.info):
                im = im.convert("RGBA")
                ground = Image.new("RGBA", im.size, (255, 255, 255, 255))
                im = Image.alpha_composite(ground, im)
            gray = np.asarray(im.convert("L"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise RasterError(f"cannot decode {path}: {exc}") from exc
    if gray.ndim != 2 or gray.size == 0:
        raise RasterError(f"{path} has zero dimension")
    return gray.copy()


def save_gray(img: np.ndarray, path) -> None:
    Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8), mode="L").save(path, format="PNG")


def mask_to_gray(mask: np.ndarray) -> np.ndarray:
    """Render an ink mask as ink=0 on ground=255."""
    return np.where(mask, 0, 255).astype(np.uint8)


def resize_256(img: np.ndarray) -> np.ndarray:
    if img.shape == (SIZE, SIZE):
        return img
    resized = Image.fromarray(np.asarray(img, dtype=np.uint8), mode="L").resize(
        (SIZE, SIZE), Image.BILINEAR
    )
    return np.asarray(resized, dtype=np.uint8).copy()


def binarize(img: np.ndarray, threshold: int = 128) -> np.ndarray:
    if not 0 <= threshold <= 255:
        raise ValueError(f"threshold {threshold} outside [0, 255]")
    return np.asarray(img) < threshold


def connected_components(mask: np.ndarray, connectivity: int = 8):
    """Label ink pixels.

    Returns ``(labels, sizes)`` where labels run 1..n in raster-scan order of
    first appearance and ``sizes[i]`` is the pixel count of label ``i + 1``.
    """
    if connectivity == 8:
        structure = _EIGHT
    elif connectivity == 4:
        structure = _FOUR
    else:
        raise ValueError("connectivity must be 4 or 8")
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=structure)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return labels, sizes


def euler_number(mask: np.ndarray) -> int:
    """8-connected ink components minus 4-connected holes."""
    mask = np.asarray(mask, dtype=bool)
    _, n_fg = ndimage.label(mask, structure=_EIGHT)
    # the one-pixel frame joins every border-touching background region
    _, n_bg = ndimage.label(~np.pad(mask, 1), structure=_FOUR)
    return int(n_fg - (n_bg - 1))


def _neighborhood(code: int) -> np.ndarray:
    win = np.zeros((3, 3), dtype=bool)
    for bit, (dy, dx) in enumerate(NEIGHBOR_OFFSETS):
        if code >> bit & 1:
            win[1 + dy, 1 + dx] = True
    return win


def _build_deletable_table() -> np.ndarray:
    """Lookup of neighbourhood codes whose center may be removed.

    A center pixel is deletable when it is simple for (8, 4) topology, i.e.
    its ink neighbours form exactly one 8-component and exactly one
    background 4-component touches it, and it is not an endpoint.
    """
    table = np.zeros(256, dtype=bool)
    for code in range(256):
        win = _neighborhood(code)
        if win.sum() < 2:
            continue
        _, n_fg = ndimage.label(win, structure=_EIGHT)
        bg = ~win
        bg[1, 1] = False
        bg_labels, _ = ndimage.label(bg, structure=_FOUR)
        touching = {bg_labels[1 + dy, 1 + dx] for dy, dx in ((-1, 0), (0, 1), (1, 0), (0, -1))}
        touching.discard(0)
        table[code] = n_fg == 1 and len(touching) == 1
    return table


_DELETABLE = _build_deletable_table()


def _thin(mask: np.ndarray) -> np.ndarray:
    img = np.pad(mask, 1).astype(np.uint8)
    width = img.shape[1]
    flat = img.ravel()
    offsets = [dy * width + dx for dy, dx in NEIGHBOR_OFFSETS]
    # north/east borders first, then south/west
    passes = (((-1, 0), (0, 1)), ((1, 0), (0, -1)))
    while True:
        changed = False
        for sides in passes:
            border = np.zeros_like(img, dtype=bool)
            core = img[1:-1, 1:-1].astype(bool)
            for dy, dx in sides:
                border[1:-1, 1:-1] |= core & (img[1 + dy:img.shape[0] - 1 + dy, 1 + dx:width - 1 + dx] == 0)
            # candidates are fixed per pass, each one rechecked against the
            # live image so removals stay topology-safe one at a time
            for idx in np.flatnonzero(border):
                code = 0
                for bit, off in enumerate(offsets):
                    if flat[idx + off]:
                        code |= 1 << bit
                if _DELETABLE[code]:
                    flat[idx] = 0
                    changed = True
        if not changed:
            break
    return img[1:-1, 1:-1].astype(bool)


def skeletonize(mask: np.ndarray) -> Skeleton:
    mask = np.asarray(mask, dtype=bool)
    before = euler_number(mask)
    thin = _thin(mask) if mask.any() else mask.copy()
    return Skeleton(thin, before, euler_number(thin))


_FOUR_STEPS = ((1, 0), (0, 1), (-1, 0), (0, -1))
_DIAG_STEPS = ((1, 1), (1, -1), (-1, 1), (-1, -1))


def trace_curve(pixels) -> CurveTrace:
    """Order the pixels of one 8-connected skeleton component.

    ``pixels`` is an iterable of ``(x, y)``. Open curves start at the
    lexicographically smallest endpoint; curves without endpoints start at
    the smallest pixel. At each step an unvisited 4-neighbour is preferred
    over a diagonal one. Pixels the walk never reaches are counted in
    ``dropped``.
    """
    pts = {(int(x), int(y)) for x, y in pixels}
    if not pts:
        return CurveTrace(np.zeros((0, 2), dtype=int), False, 0)

    def neighbors(p):
        x, y = p
        four = [(x + dx, y + dy) for dx, dy in _FOUR_STEPS if (x + dx, y + dy) in pts]
        diag = [(x + dx, y + dy) for dx, dy in _DIAG_STEPS if (x + dx, y + dy) in pts]
        return four, diag

    endpoints = sorted(p for p in pts if sum(map(len, neighbors(p))) == 1)
    start = endpoints[0] if endpoints else min(pts)
    order = [start]
    seen = {start}
    current = start
    while True:
        four, diag = neighbors(current)
        step = [q for q in four if q not in seen] or [q for q in diag if q not in seen]
        if not step:
            break
        current = step[0]
        seen.add(current)
        order.append(current)

    closed = False
    if not endpoints and len(order) >= 3:
        (x0, y0), (x1, y1) = order[0], order[-1]
        closed = max(abs(x0 - x1), abs(y0 - y1)) == 1
    return CurveTrace(np.array(order, dtype=int), closed, len(pts) - len(order))
