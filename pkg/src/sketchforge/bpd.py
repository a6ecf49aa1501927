"""Bezier pivot based deformation.

The skeleton is cut into a grid of ``a x a`` cells; the largest curve in each
cell is fitted with a cubic Bezier, every pivot is jittered by a uniform
offset in ``[-alpha, alpha]^2`` and the full-thickness ink is warped with an
affine moving-least-squares map built from the pivot displacements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import bezier
from .bezier import CubicBezier
from .raster import (
    CurveTrace,
    Skeleton,
    binarize,
    connected_components,
    mask_to_gray,
    resize_256,
    skeletonize,
    trace_curve,
)

MLS_EPS = 1e-8
PREIMAGE_STEPS = 8
PREIMAGE_HALVINGS = 4
_CHUNK = 4096


@dataclass(frozen=True)
class PatchCurve:
    grid_cell: tuple  # (column, row)
    trace: CurveTrace
    fitted: CubicBezier


@dataclass(frozen=True)
class ControlPair:
    source: np.ndarray
    target: np.ndarray


@dataclass(frozen=True)
class DeformParams:
    a: int = 32
    alpha: float = 8.0
    n_min: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.a < 8:
            raise ValueError(f"cell size a={self.a} must be >= 8")
        if self.alpha < 0:
            raise ValueError(f"alpha={self.alpha} must be >= 0")
        if self.n_min < 2:
            raise ValueError(f"n_min={self.n_min} must be >= 2")


def segment_patches(skel, a: int = 32, n_min: int = 8) -> list[PatchCurve]:
    """Fit one Bezier per grid cell to the largest 8-connected skeleton piece.

    Cells on the right/bottom edge may be partial. Pieces with fewer than
    ``n_min`` pixels, before or after tracing, are skipped.
    """
    mask = skel.mask if isinstance(skel, Skeleton) else np.asarray(skel, dtype=bool)
    height, width = mask.shape
    curves = []
    for row in range(math.ceil(height / a)):
        for col in range(math.ceil(width / a)):
            y0, x0 = row * a, col * a
            cell = mask[y0:y0 + a, x0:x0 + a]
            if cell.sum() < n_min:
                continue
            labels, sizes = connected_components(cell, 8)
            # argmax picks the first label on ties, i.e. raster order
            best = int(np.argmax(sizes)) + 1
            if sizes[best - 1] < n_min:
                continue
            ys, xs = np.nonzero(labels == best)
            trace = trace_curve(zip(xs + x0, ys + y0))
            if len(trace) < n_min:
                continue
            params = bezier.chord_length_params(trace)
            curves.append(PatchCurve((col, row), trace, bezier.fit(trace, params)))
    return curves


def perturb_pivots(curves, alpha: float, rng: np.random.Generator) -> list[ControlPair]:
    """Shift all four pivots of every curve by independent uniform draws."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if not curves:
        return []
    sources = np.concatenate([c.fitted.pivots for c in curves])
    deltas = rng.uniform(-alpha, alpha, size=sources.shape)
    targets = sources + deltas
    return [ControlPair(s, t) for s, t in zip(sources, targets)]


def _pair_arrays(pairs):
    src = np.array([p.source for p in pairs], dtype=float).reshape(-1, 2)
    dst = np.array([p.target for p in pairs], dtype=float).reshape(-1, 2)
    return src, dst


def _spans_plane(src: np.ndarray) -> bool:
    if len(src) < 3:
        return False
    centered = src - src.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    return sv[1] > 1e-9 * max(sv[0], 1.0)


def mls_map(points, src, dst, eps: float = MLS_EPS) -> np.ndarray:
    """Affine moving-least-squares image of ``points`` (``(n, 2)`` as x, y).

    Weights are ``1 / (|p_i - v|^2 + eps)``. Where the weighted moment matrix
    is singular, including every point when the sources are collinear or
    fewer than three, the weighted mean displacement is used instead.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    out = np.empty_like(pts)
    affine = _spans_plane(src)
    for lo in range(0, len(pts), _CHUNK):
        v = pts[lo:lo + _CHUNK]
        d = v[:, None, :] - src[None, :, :]
        w = 1.0 / (np.einsum("npi,npi->np", d, d) + eps)
        wsum = w.sum(axis=1, keepdims=True)
        p_star = (w @ src) / wsum
        q_star = (w @ dst) / wsum
        shifted = v - p_star + q_star
        if affine:
            p_hat = src[None, :, :] - p_star[:, None, :]
            q_hat = dst[None, :, :] - q_star[:, None, :]
            moments = (w[:, :, None] * p_hat).transpose(0, 2, 1) @ np.concatenate([p_hat, q_hat], axis=2)
            a, b = moments[:, :, :2], moments[:, :, 2:]
            det = a[:, 0, 0] * a[:, 1, 1] - a[:, 0, 1] * a[:, 1, 0]
            scale = (a[:, 0, 0] + a[:, 1, 1]) ** 2
            ok = np.abs(det) > 1e-12 * scale
            inv = np.empty_like(a)
            safe = np.where(ok, det, 1.0)
            inv[:, 0, 0] = a[:, 1, 1] / safe
            inv[:, 1, 1] = a[:, 0, 0] / safe
            inv[:, 0, 1] = -a[:, 0, 1] / safe
            inv[:, 1, 0] = -a[:, 1, 0] / safe
            m = inv @ b
            mapped = np.einsum("ni,nij->nj", v - p_star, m) + q_star
            shifted = np.where(ok[:, None], mapped, shifted)
        out[lo:lo + _CHUNK] = shifted
    return out


def mls_preimage(points, src, dst, start=None, steps: int = PREIMAGE_STEPS, tol: float = 1e-7) -> np.ndarray:
    """Invert :func:`mls_map` at ``points`` by damped Newton steps.

    The Jacobian comes from one-sided differences, which are exact for an
    affine map, so such a map is inverted in a single step. A step is halved
    until the residual shrinks; a point with no improving step stops there.
    Where the warp folds there may be no preimage; callers check the residual.
    ``start`` defaults to the points themselves.
    """
    u = np.asarray(points, dtype=float).reshape(-1, 2)
    p = u.copy() if start is None else np.array(start, dtype=float).reshape(-1, 2)
    resid = mls_map(p, src, dst) - u
    h = 1e-3
    live = np.ones(len(u), dtype=bool)
    for _ in range(steps):
        idx = np.nonzero(live & (np.abs(resid).max(axis=1) > tol))[0]
        if not len(idx):
            break
        q, r = p[idx], resid[idx]
        diff = mls_map(np.concatenate([q + [h, 0.0], q + [0.0, h]]), src, dst).reshape(2, -1, 2)
        jac = np.stack([diff[0], diff[1]], axis=-1) - (r + u[idx])[:, :, None]
        jac /= h
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        safe = np.where(np.abs(det) > 1e-9, det, np.inf)
        step = np.column_stack([
            jac[:, 1, 1] * r[:, 0] - jac[:, 0, 1] * r[:, 1],
            jac[:, 0, 0] * r[:, 1] - jac[:, 1, 0] * r[:, 0],
        ]) / safe[:, None]
        norm = np.einsum("ni,ni->n", r, r)
        pending = np.ones(len(idx), dtype=bool)
        for _ in range(PREIMAGE_HALVINGS):
            sel = np.nonzero(pending)[0]
            if not len(sel):
                break
            trial = q[sel] - step[sel]
            r_trial = mls_map(trial, src, dst) - u[idx[sel]]
            better = np.einsum("ni,ni->n", r_trial, r_trial) < norm[sel]
            p[idx[sel[better]]] = trial[better]
            resid[idx[sel[better]]] = r_trial[better]
            pending[sel[better]] = False
            step[sel] *= 0.5
        live[idx[pending]] = False
    return p


def mls_warp(mask: np.ndarray, pairs) -> np.ndarray:
    """Forward-map every ink pixel through the MLS deformation.

    Mapped positions are rounded to the nearest pixel and dropped when they
    leave the frame. Holes opened by rounding are then filled: a pixel that a
    3x3 closing would add is inked only if it has a preimage and that preimage
    rounds to source ink.
    """
    mask = np.asarray(mask, dtype=bool)
    if not pairs:
        return mask.copy()
    src, dst = _pair_arrays(pairs)
    height, width = mask.shape
    ys, xs = np.nonzero(mask)
    out = np.zeros_like(mask)
    if len(xs) == 0:
        return out
    ink = np.column_stack([xs, ys]).astype(float)
    fwd = mls_map(ink, src, dst)
    mapped = np.rint(fwd).astype(np.int64)
    inside = (mapped[:, 0] >= 0) & (mapped[:, 0] < width) & (mapped[:, 1] >= 0) & (mapped[:, 1] < height)
    out[mapped[inside, 1], mapped[inside, 0]] = True

    gaps = ndimage.binary_closing(out, structure=np.ones((3, 3), dtype=bool)) & ~out
    gy, gx = np.nonzero(gaps)
    if len(gx):
        cand = np.column_stack([gx, gy]).astype(float)
        # start from the ink pixel whose image lies nearest
        _, near = cKDTree(fwd).query(cand)
        pre = mls_preimage(cand, src, dst, start=ink[near] + cand - fwd[near])
        back = np.rint(pre).astype(np.int64)
        # a pixel without a preimage inside its own footprint is left empty
        ok = np.abs(mls_map(pre, src, dst) - cand).max(axis=1) < 0.5
        ok &= (back[:, 0] >= 0) & (back[:, 0] < width) & (back[:, 1] >= 0) & (back[:, 1] < height)
        ok[ok] = mask[back[ok, 1], back[ok, 0]]
        out[gy[ok], gx[ok]] = True
    return out


def deform_mask(ink: np.ndarray, params: DeformParams) -> np.ndarray:
    """Deform a binarized sketch; the skeleton only supplies the pivots."""
    skel = skeletonize(ink)
    curves = segment_patches(skel, params.a, params.n_min)
    rng = np.random.default_rng(params.seed)
    pairs = perturb_pivots(curves, params.alpha, rng)
    return mls_warp(ink, pairs)


def deform_sketch(img: np.ndarray, params: DeformParams, threshold: int = 128) -> np.ndarray:
    """Resize, binarize, deform and render one sketch as ink=0 on ground=255.

    A sketch without ink comes back as the resized input.
    """
    gray = resize_256(np.asarray(img, dtype=np.uint8))
    ink = binarize(gray, threshold)
    if not ink.any():
        return gray.copy()
    return mask_to_gray(deform_mask(ink, params))
