from __future__ import annotations

import math

import numpy as np

from sidflow.pipeline import affine_fit


def test_affine_fit_exact_line():
    x = np.array([1, 5, 8, 10, 12, 16, 20], dtype=float)
    a, b, resid = affine_fit(x, 0.3 + 0.125 * x)
    assert math.isclose(a, 0.3, rel_tol=1e-12)
    assert math.isclose(b, 0.125, rel_tol=1e-12)
    assert resid < 1e-14


def test_affine_fit_matches_polyfit(rng):
    x = np.arange(1.0, 21.0)
    y = 0.1 * x + rng.normal(0.0, 0.05, size=x.shape)
    a, b, _ = affine_fit(x, y)
    b_ref, a_ref = np.polyfit(x, y, 1)
    assert math.isclose(a, a_ref, rel_tol=1e-9, abs_tol=1e-12)
    assert math.isclose(b, b_ref, rel_tol=1e-9)


def test_affine_fit_residual_by_hand():
    # fit is 0.5 + 0.5 x, residuals (-0.5, 1, -0.5), |y| = sqrt(5)
    a, b, resid = affine_fit([0, 1, 2], [0, 2, 1])
    assert math.isclose(a, 0.5, rel_tol=1e-12)
    assert math.isclose(b, 0.5, rel_tol=1e-12)
    assert math.isclose(resid, math.sqrt(0.3), rel_tol=1e-12)


def test_affine_fit_residual_stays_bounded_near_zero_intercept():
    # a proportional cost whose fitted line crosses zero next to x = 1
    x = [1, 5, 8, 10, 16]
    y = [0.12, 0.5, 0.75, 0.97, 1.982]
    _, _, resid = affine_fit(x, y)
    assert resid < 0.2
