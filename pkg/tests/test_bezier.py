import numpy as np
import pytest
from hypothesis import given, strategies as st

from sketchforge.bezier import (
    CubicBezier,
    chord_length_params,
    evaluate,
    fit,
    fit_residual,
    normal_coefficients,
)
from sketchforge.raster import CurveTrace


def de_casteljau(pivots, t):
    pts = np.array(pivots, dtype=float)
    while len(pts) > 1:
        pts = (1 - t) * pts[:-1] + t * pts[1:]
    return pts[0]


def lstsq_inner_pivots(v, t):
    """Independent solve: the inner pivots as an unconstrained linear LSQ."""
    phi = 1 - t
    design = np.column_stack([3 * t * phi**2, 3 * t**2 * phi])
    rhs = v - np.outer(phi**3, v[0]) - np.outer(t**3, v[-1])
    sol, *_ = np.linalg.lstsq(design, rhs, rcond=None)
    return sol


coords = st.floats(-100, 100, allow_nan=False)


@given(st.lists(st.tuples(coords, coords), min_size=4, max_size=4), st.floats(0, 1))
def test_evaluate_matches_de_casteljau(pivots, t):
    curve = CubicBezier(*pivots)
    assert np.allclose(evaluate(curve, t), de_casteljau(pivots, t), atol=1e-9)


@given(st.lists(st.tuples(coords, coords), min_size=4, max_size=4))
def test_endpoints_are_exact(pivots):
    curve = CubicBezier(*pivots)
    assert np.array_equal(evaluate(curve, 0.0), curve.p0)
    assert np.array_equal(evaluate(curve, 1.0), curve.p3)


def test_evaluate_rejects_out_of_range():
    curve = CubicBezier((0, 0), (1, 0), (2, 0), (3, 0))
    with pytest.raises(ValueError):
        evaluate(curve, 1.5)
    with pytest.raises(ValueError):
        CubicBezier((0, 0), (np.nan, 0), (2, 0), (3, 0))


def test_chord_length_examples():
    assert chord_length_params(np.array([[0, 0], [2, 0]])).tolist() == [0.0, 1.0]
    assert np.allclose(chord_length_params(np.array([[0, 0], [1, 1], [2, 2]])), [0, 0.5, 1])
    assert np.allclose(chord_length_params(np.array([[0, 0], [3, 0], [3, 1]])), [0, 0.75, 1])
    with pytest.raises(ValueError):
        chord_length_params(np.array([[5, 5], [5, 5]]))
    trace = CurveTrace(np.array([[0, 0], [1, 0], [1, 1]]), False)
    assert np.allclose(chord_length_params(trace), [0, 0.5, 1])


pixels = st.tuples(st.integers(0, 255), st.integers(0, 255))


@given(st.lists(pixels, min_size=2, max_size=30, unique=True))
def test_chord_params_are_monotone_in_unit_interval(pts):
    t = chord_length_params(np.array(pts))
    assert t[0] == 0 and t[-1] == 1
    assert np.all(np.diff(t) >= 0)


def test_fit_degree_elevated_line():
    v = np.array([[0, 0], [1, 1], [2, 2], [3, 3]], dtype=float)
    t = np.array([0, 1 / 3, 2 / 3, 1])
    curve = fit(v, t)
    oracle = lstsq_inner_pivots(v, t)
    assert np.allclose(oracle, [[1, 1], [2, 2]])
    assert np.allclose(curve.p1, [1, 1], atol=1e-12)
    assert np.allclose(curve.p2, [2, 2], atol=1e-12)


def test_fit_coincident_points_falls_back():
    v = np.full((6, 2), 5.0)
    curve = fit(v, np.linspace(0, 1, 6))
    assert np.allclose(curve.pivots, 5.0, atol=1e-9)
    # all parameters equal: singular normal system
    curve = fit(v, np.zeros(6))
    assert np.array_equal(curve.pivots, np.full((4, 2), 5.0))


def test_fit_two_points_falls_back_to_chord_thirds():
    curve = fit(np.array([[0.0, 0.0], [3.0, 6.0]]), np.array([0.0, 1.0]))
    assert np.allclose(curve.p1, [1, 2]) and np.allclose(curve.p2, [2, 4])


def test_fit_matches_generic_lstsq():
    rng = np.random.default_rng(4)
    for _ in range(50):
        v = rng.uniform(0, 30, size=(int(rng.integers(5, 40)), 2))
        t = chord_length_params(v)
        curve = fit(v, t)
        assert np.allclose(np.stack([curve.p1, curve.p2]), lstsq_inner_pivots(v, t), atol=1e-8)


def test_normal_coefficients_symmetric():
    rng = np.random.default_rng(0)
    v = rng.uniform(0, 30, size=(20, 2))
    a1, b1, c1, a2, b2, c2 = normal_coefficients(v, chord_length_params(v))
    assert a2 == b1
    assert c1.shape == c2.shape == (2,)


def test_residual_examples():
    curve = CubicBezier((0, 0), (1, 2), (3, 2), (4, 0))
    t = np.linspace(0, 1, 9)
    pts = evaluate(curve, t)
    assert fit_residual(curve, pts, t) < 1e-12
    pts[4] += (0, 1)
    assert fit_residual(curve, pts, t) == pytest.approx(1.0)


def test_fit_beats_perturbed_pivots():
    rng = np.random.default_rng(1)
    for _ in range(20):
        v = rng.uniform(0, 31, size=(15, 2))
        t = chord_length_params(v)
        best = fit(v, t)
        base = fit_residual(best, v, t)
        for _ in range(100):
            d = rng.normal(0, 0.5, size=(2, 2))
            other = CubicBezier(best.p0, best.p1 + d[0], best.p2 + d[1], best.p3)
            assert base <= fit_residual(other, v, t)


def test_fit_gradient_vanishes():
    rng = np.random.default_rng(2)
    h = 1e-4
    for _ in range(20):
        v = rng.uniform(0, 31, size=(12, 2))
        t = chord_length_params(v)
        curve = fit(v, t)
        piv = curve.pivots
        grad = []
        for i in (1, 2):
            for d in (0, 1):
                up, down = piv.copy(), piv.copy()
                up[i, d] += h
                down[i, d] -= h
                grad.append((fit_residual(CubicBezier(*up), v, t) - fit_residual(CubicBezier(*down), v, t)) / (2 * h))
        assert np.linalg.norm(grad) < 1e-8
