"""Slow, loop-based reference implementations used as test oracles."""

import math

import numpy as np
from scipy.optimize import minimize

from sketchforge.raster import binarize, resize_256, skeletonize


def naive_hog(patch, cell=8, bins=9, block=2, eps=1e-6):
    """HOG by explicit loops over pixels, cells and blocks."""
    p = np.asarray(patch, dtype=float)
    h, w = p.shape
    nc = h // cell
    hist = [[[0.0] * bins for _ in range(nc)] for _ in range(nc)]
    width = 180.0 / bins
    for y in range(nc * cell):
        for x in range(nc * cell):
            gx = p[y, x + 1] - p[y, x - 1] if 0 < x < w - 1 else 0.0
            gy = p[y + 1, x] - p[y - 1, x] if 0 < y < h - 1 else 0.0
            mag = math.hypot(gx, gy)
            if mag == 0:
                continue
            ang = math.degrees(math.atan2(gy, gx)) % 180.0
            # bin i is centred at (i + 0.5) * width; split between the two nearest
            pos = ang / width - 0.5
            lo = math.floor(pos)
            frac = pos - lo
            hist[y // cell][x // cell][lo % bins] += mag * (1 - frac)
            hist[y // cell][x // cell][(lo + 1) % bins] += mag * frac
    out = []
    for by in range(nc - block + 1):
        for bx in range(nc - block + 1):
            v = []
            for cy in range(by, by + block):
                for cx in range(bx, bx + block):
                    v.extend(hist[cy][cx])
            norm = math.sqrt(sum(a * a for a in v) + eps * eps)
            out.extend(a / norm for a in v)
    return np.array(out)


def brute_force_means(patches, assignments, k):
    size = patches.shape[1]
    means = np.zeros((k, size, size))
    counts = np.zeros(k, dtype=int)
    for j in range(k):
        members = [p for p, a in zip(patches, assignments) if a == j]
        counts[j] = len(members)
        if members:
            for y in range(size):
                for x in range(size):
                    means[j, y, x] = sum(float(m[y, x]) for m in members) / len(members)
    return means, counts


def naive_reconstruction(centers, labels, strokes, weights, shape):
    """Sum weighted strokes pixel by pixel, then divide by sqrt(coverage)."""
    height, width = shape
    size = strokes.shape[1]
    half = size // 2
    total = np.zeros(shape)
    count = np.zeros(shape, dtype=int)
    for (cx, cy), j in zip(centers, labels):
        for dy in range(size):
            for dx in range(size):
                y, x = cy - half + dy, cx - half + dx
                if 0 <= y < height and 0 <= x < width:
                    total[y, x] += weights[j] * strokes[j, dy, dx]
                    count[y, x] += 1
    values = np.zeros(shape)
    for y in range(height):
        for x in range(width):
            if count[y, x]:
                values[y, x] = total[y, x] / math.sqrt(count[y, x])
    return values, count


def oracle_label(patch, ens):
    """Cluster id by loop HOG and hand-summed ensemble scores."""
    d = naive_hog(patch)
    k = ens.models[0].weights.shape[0]
    scores = [sum(float(m.weights[j] @ d + m.biases[j]) for m in ens.models) for j in range(k)]
    return int(np.argmax(scores))


def oracle_reconstruct(img, cb, ens):
    gray = resize_256(img)
    skel = skeletonize(binarize(gray)).mask
    ys, xs = np.nonzero(skel)
    centers, labels = [], []
    padded = np.pad(skel, 15).astype(float)
    for x, y in zip(xs, ys):
        centers.append((x, y))
        labels.append(oracle_label(padded[y:y + 31, x:x + 31], ens))
    return naive_reconstruction(centers, labels, cb.mean_strokes, cb.weights, gray.shape)


def hard_margin_svm(x, y):
    """Binary hard-margin SVM (y in {-1, 1}) by constrained minimization of |w|^2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dim = x.shape[1]
    cons = {"type": "ineq", "fun": lambda z: y * (x @ z[:dim] + z[dim]) - 1.0}
    res = minimize(lambda z: 0.5 * z[:dim] @ z[:dim], np.zeros(dim + 1), constraints=[cons], method="SLSQP")
    return res.x[:dim], res.x[dim]
