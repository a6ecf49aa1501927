"""Mean-stroke codebook: skeleton patches, HOG descriptors, k-means and cluster means."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .raster import Skeleton

PATCH = 31
FORMAT_VERSION = 1
MAGIC = b"SKCB"
CENTROID_MAGIC = b"SKCT"


@dataclass(frozen=True)
class HogConfig:
    cell: int = 8
    bins: int = 9
    block: int = 2
    stride: int = 1
    eps: float = 1e-6

    def n_cells(self, size: int = PATCH) -> int:
        return size // self.cell

    def dim(self, size: int = PATCH) -> int:
        blocks = (self.n_cells(size) - self.block) // self.stride + 1
        return blocks * blocks * self.block * self.block * self.bins


@dataclass
class StrokeCodebook:
    mean_strokes: np.ndarray  # (k, patch, patch)
    counts: np.ndarray  # (k,)
    weights: np.ndarray | None = None  # (k,), set after classifier evaluation
    hog: HogConfig = field(default_factory=HogConfig)
    centroids: np.ndarray | None = None  # (k, dim), HOG-space cluster centers

    @property
    def k(self) -> int:
        return len(self.mean_strokes)

    @property
    def patch_size(self) -> int:
        return self.mean_strokes.shape[1]

    def with_weights(self, weights) -> "StrokeCodebook":
        return StrokeCodebook(self.mean_strokes, self.counts, np.asarray(weights, dtype=float), self.hog, self.centroids)


def patch_centers(skel) -> np.ndarray:
    """``(n, 2)`` array of ``(x, y)`` for every skeleton pixel, raster order."""
    mask = skel.mask if isinstance(skel, Skeleton) else np.asarray(skel, dtype=bool)
    ys, xs = np.nonzero(mask)
    return np.column_stack([xs, ys])


def extract_patches(skel, centers=None, size: int = PATCH) -> np.ndarray:
    """Cut a ``size x size`` window around each center, zero-padded at borders.

    Returns ``(n, size, size)`` float patches with ink = 1.
    """
    mask = skel.mask if isinstance(skel, Skeleton) else np.asarray(skel, dtype=bool)
    if centers is None:
        centers = patch_centers(mask)
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    half = size // 2
    padded = np.pad(mask, half).astype(np.float64)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (size, size))
    # window origin in padded coordinates equals the center in image coordinates
    return windows[centers[:, 1], centers[:, 0]].copy()


def subsample(items, rho: int, rng: np.random.Generator):
    """Keep a uniform random ``floor(n / rho)`` subset, in original order."""
    if rho < 1:
        raise ValueError("rho must be >= 1")
    n = len(items)
    if rho == 1:
        return items
    keep = np.sort(rng.choice(n, size=n // rho, replace=False))
    if isinstance(items, np.ndarray):
        return items[keep]
    return [items[i] for i in keep]


def hog_batch(patches, config: HogConfig = HogConfig()) -> np.ndarray:
    """HOG descriptors for a stack of square patches, shape ``(n, dim)``.

    Centered ``[-1, 0, 1]`` gradients (zero on the outermost rows/columns),
    unsigned orientations split linearly between the two nearest bin centers,
    cells anchored at the patch origin, overlapping blocks L2-normalized.
    """
    p = np.asarray(patches, dtype=np.float64)
    if p.ndim == 2:
        p = p[None]
    n, size, _ = p.shape
    gx = np.zeros_like(p)
    gy = np.zeros_like(p)
    gx[:, :, 1:-1] = p[:, :, 2:] - p[:, :, :-2]
    gy[:, 1:-1, :] = p[:, 2:, :] - p[:, :-2, :]
    mag = np.hypot(gx, gy)
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0

    width = 180.0 / config.bins
    pos = angle / width - 0.5
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.int64) % config.bins
    hi = (lo + 1) % config.bins

    nc = config.n_cells(size)
    span = nc * config.cell
    cell_of = np.arange(span) // config.cell
    cy, cx = np.meshgrid(cell_of, cell_of, indexing="ij")
    cell_idx = (cy * nc + cx).ravel()

    width_h = nc * nc * config.bins
    m = mag[:, :span, :span].reshape(n, -1)
    f = frac[:, :span, :span].reshape(n, -1)
    base = (np.arange(n)[:, None] * width_h + cell_idx[None, :] * config.bins)
    idx = np.concatenate([(base + lo[:, :span, :span].reshape(n, -1)).ravel(),
                          (base + hi[:, :span, :span].reshape(n, -1)).ravel()])
    votes = np.concatenate([(m * (1.0 - f)).ravel(), (m * f).ravel()])
    hist = np.bincount(idx, votes, minlength=n * width_h).reshape(n, nc, nc, config.bins)

    nb = (nc - config.block) // config.stride + 1
    blocks = []
    for by in range(nb):
        for bx in range(nb):
            y, x = by * config.stride, bx * config.stride
            v = hist[:, y:y + config.block, x:x + config.block, :].reshape(n, -1)
            norm = np.sqrt(np.sum(v * v, axis=1, keepdims=True) + config.eps**2)
            blocks.append(v / norm)
    return np.concatenate(blocks, axis=1)


def hog(patch, config: HogConfig = HogConfig()) -> np.ndarray:
    return hog_batch(np.asarray(patch)[None], config)[0]


def _sq_distances(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_distances(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centers[j] = x[idx]
        closest = np.minimum(closest, _sq_distances(x, centers[j:j + 1])[:, 0])
    return centers


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: list  # inertia after each Lloyd update
    n_iter: int


def kmeans(descriptors, k: int, rng: np.random.Generator, max_iter: int = 300) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations until assignments settle.

    An emptied cluster is re-seeded at the point lying farthest from its
    current centroid.
    """
    x = np.asarray(descriptors, dtype=np.float64)
    if len(x) < k:
        raise ValueError(f"{len(x)} descriptors cannot form {k} clusters")
    if k < 1:
        raise ValueError("k must be >= 1")
    centroids = _kmeans_pp(x, k, rng)
    assign = np.full(len(x), -1)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        dist = _sq_distances(x, centroids)
        new_assign = dist.argmin(axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=k)
        own = dist[np.arange(len(x)), assign]
        for j in np.flatnonzero(counts == 0):
            # never take the last member of a cluster
            movable = np.where(counts[assign] > 1, own, -np.inf)
            far = int(movable.argmax())
            counts[assign[far]] -= 1
            assign[far] = j
            counts[j] = 1
            own[far] = -np.inf
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        centroids = sums / counts[:, None]
        diff = x - centroids[assign]
        history.append(float(np.sum(diff * diff)))
    diff = x - centroids[assign]
    return KMeansResult(assign, centroids, float(np.sum(diff * diff)), history, n_iter)


def assign_to_centroids(descriptors, centroids) -> np.ndarray:
    x = np.asarray(descriptors, dtype=np.float64)
    if len(x) == 0:
        return np.zeros(0, dtype=np.int64)
    return _sq_distances(x, np.asarray(centroids, dtype=np.float64)).argmin(axis=1)


def mean_strokes(patches, assignments, k: int, centroids=None, config: HogConfig = HogConfig()) -> StrokeCodebook:
    """Pixel-wise mean of the member patches of each cluster."""
    p = np.asarray(patches)
    a = np.asarray(assignments, dtype=np.int64)
    if len(p) != len(a):
        raise ValueError("patches and assignments differ in length")
    size = p.shape[1] if p.ndim == 3 else PATCH
    counts = np.bincount(a, minlength=k)[:k]
    sums = np.zeros((k, size, size))
    for lo in range(0, len(p), 4096):
        np.add.at(sums, a[lo:lo + 4096], p[lo:lo + 4096].astype(np.float64))
    means = np.zeros_like(sums)
    filled = counts > 0
    means[filled] = sums[filled] / counts[filled, None, None]
    return StrokeCodebook(means, counts.astype(np.int64), None, config, centroids)


# -- container -------------------------------------------------------------

_HEADER = struct.Struct("<4sIII")
_HOG_BLOCK = struct.Struct("<IIIId")
_SECTION = struct.Struct("<4sII")


def codebook_bytes(cb: StrokeCodebook) -> bytes:
    """Serialize as ``SKCB`` + header + HOG config + strokes, counts, weights.

    Unset weights are written as NaN. An ``SKCT`` section with the HOG-space
    centroids follows when they are known.
    """
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, FORMAT_VERSION, cb.k, cb.patch_size))
    h = cb.hog
    buf.write(_HOG_BLOCK.pack(h.cell, h.bins, h.block, h.stride, h.eps))
    buf.write(np.asarray(cb.mean_strokes, dtype="<f4").tobytes())
    buf.write(np.asarray(cb.counts, dtype="<u4").tobytes())
    weights = np.full(cb.k, np.nan) if cb.weights is None else cb.weights
    buf.write(np.asarray(weights, dtype="<f4").tobytes())
    if cb.centroids is not None:
        c = np.asarray(cb.centroids, dtype="<f4")
        buf.write(_SECTION.pack(CENTROID_MAGIC, c.shape[0], c.shape[1]))
        buf.write(c.tobytes())
    return buf.getvalue()


def parse_codebook(data: bytes, offset: int = 0):
    """Decode a codebook container; returns ``(codebook, end_offset)``."""
    magic, version, k, size = _HEADER.unpack_from(data, offset)
    if magic != MAGIC:
        raise ValueError(f"not a codebook container (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported codebook version {version}")
    offset += _HEADER.size
    cell, bins, block, stride, eps = _HOG_BLOCK.unpack_from(data, offset)
    offset += _HOG_BLOCK.size
    n = k * size * size
    strokes = np.frombuffer(data, "<f4", n, offset).reshape(k, size, size).astype(np.float64)
    offset += 4 * n
    counts = np.frombuffer(data, "<u4", k, offset).astype(np.int64)
    offset += 4 * k
    weights = np.frombuffer(data, "<f4", k, offset).astype(np.float64)
    offset += 4 * k
    if np.all(np.isnan(weights)):
        weights = None
    centroids = None
    if data[offset:offset + 4] == CENTROID_MAGIC:
        _, rows, cols = _SECTION.unpack_from(data, offset)
        offset += _SECTION.size
        centroids = np.frombuffer(data, "<f4", rows * cols, offset).reshape(rows, cols).astype(np.float64)
        offset += 4 * rows * cols
    config = HogConfig(cell, bins, block, stride, eps)
    return StrokeCodebook(strokes, counts, weights, config, centroids), offset


def save_codebook(cb: StrokeCodebook, path) -> None:
    with open(path, "wb") as fh:
        fh.write(codebook_bytes(cb))


def load_codebook(path) -> StrokeCodebook:
    with open(path, "rb") as fh:
        return parse_codebook(fh.read())[0]


def stroke_tiles(cb: StrokeCodebook, scale: int = 4) -> list:
    """Mean strokes as dark-on-light 8-bit tiles, each upscaled ``scale`` times."""
    tiles = []
    for m in cb.mean_strokes:
        peak = m.max()
        norm = m / peak if peak > 0 else m
        tile = np.rint(255.0 * (1.0 - norm)).astype(np.uint8)
        tiles.append(np.kron(tile, np.ones((scale, scale), dtype=np.uint8)))
    return tiles
