"""Cubic Bezier curves and their closed-form least-squares fit.

With ``phi = 1 - t`` a cubic is ``phi^3 p0 + 3 t phi^2 p1 + 3 t^2 phi p2 + t^3 p3``.
The fit pins ``p0``/``p3`` to the trace endpoints and solves the 2x2 normal
system for the two inner pivots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DENOM_EPS = 1e-9


@dataclass(frozen=True)
class CubicBezier:
    p0: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray

    def __post_init__(self):
        for name in ("p0", "p1", "p2", "p3"):
            value = np.asarray(getattr(self, name), dtype=float).reshape(2)
            if not np.all(np.isfinite(value)):
                raise ValueError(f"{name} is not finite: {value}")
            object.__setattr__(self, name, value)

    @property
    def pivots(self) -> np.ndarray:
        return np.stack([self.p0, self.p1, self.p2, self.p3])


def bernstein(t) -> np.ndarray:
    """Cubic Bernstein basis, shape ``(len(t), 4)``."""
    t = np.asarray(t, dtype=float)
    phi = 1.0 - t
    return np.stack([phi**3, 3 * t * phi**2, 3 * t**2 * phi, t**3], axis=-1)


def evaluate(curve: CubicBezier, t):
    """Point(s) on ``curve`` at parameter ``t`` (scalar or array) in [0, 1]."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(t_arr > 1) or np.any(np.isnan(t_arr)):
        raise ValueError("t must lie in [0, 1]")
    out = bernstein(t_arr) @ curve.pivots
    # exact endpoints, independent of rounding in the basis
    out = np.where((t_arr == 0)[..., None], curve.p0, out)
    out = np.where((t_arr == 1)[..., None], curve.p3, out)
    return out


def _as_points(trace) -> np.ndarray:
    return np.asarray(getattr(trace, "points", trace), dtype=float)


def chord_length_params(trace) -> np.ndarray:
    """Normalized cumulative chord length along an ordered trace."""
    pts = _as_points(trace)
    if len(pts) < 2:
        raise ValueError("need at least two points")
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.cumsum(steps)
    if cum[-1] == 0:
        raise ValueError("trace has zero length")
    # dividing by the last partial sum keeps every value in [0, 1]
    return np.concatenate([[0.0], cum / cum[-1]])


def normal_coefficients(points, t):
    """Coefficients ``(a1, b1, c1, a2, b2, c2)`` of the two normal equations."""
    v = np.asarray(points, dtype=float)
    t = np.asarray(t, dtype=float)
    phi = 1.0 - t
    p0, p3 = v[0], v[-1]
    rest = v - np.outer(phi**3, p0) - np.outer(t**3, p3)
    a1 = np.sum(3 * t**2 * phi**4)
    b1 = np.sum(3 * t**3 * phi**3)
    c1 = (t * phi**2) @ rest
    a2 = b1
    b2 = np.sum(3 * t**4 * phi**2)
    c2 = (t**2 * phi) @ rest
    return a1, b1, c1, a2, b2, c2


def fit(trace, t) -> CubicBezier:
    """Least-squares cubic through the trace points at parameters ``t`` with fixed endpoints.

    Near-singular systems (``|a1 b2 - b1^2| < 1e-9``) fall back to inner
    pivots on the endpoint chord at 1/3 and 2/3.
    """
    v = _as_points(trace)
    t = np.asarray(t, dtype=float)
    if len(v) != len(t) or len(v) < 2:
        raise ValueError("points and params must have equal length >= 2")
    p0, p3 = v[0], v[-1]
    a1, b1, c1, _, b2, c2 = normal_coefficients(v, t)
    den = a1 * b2 - b1 * b1
    if abs(den) < DENOM_EPS:
        return CubicBezier(p0, p0 + (p3 - p0) / 3.0, p0 + 2.0 * (p3 - p0) / 3.0, p3)
    p1 = (b2 * c1 - b1 * c2) / den
    p2 = (a1 * c2 - b1 * c1) / den
    return CubicBezier(p0, p1, p2, p3)


def fit_residual(curve: CubicBezier, trace, t) -> float:
    """Sum of squared distances between the trace points and the curve at ``t``."""
    v = _as_points(trace)
    diff = v - bernstein(t) @ curve.pivots
    return float(np.sum(diff * diff))
