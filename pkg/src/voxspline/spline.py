"""Bezier curve evaluation for control-point motion models.

All routines accept control points shaped ``(..., O, D)`` so a batch of curves
can be evaluated in one call; the leading axes are carried through untouched.
"""

import os
from math import comb

import numpy as np

CANONICAL_MODES = ("none", "subtract_first", "pin_first_zero")

DEFAULT_ORDER = 5
MAX_ORDER = 16

# Out-of-range t raises instead of clamping when this is set.
DEBUG = bool(os.environ.get("VOXSPLINE_DEBUG"))


class InvalidPolygonError(ValueError):
    pass


def as_polygon(points) -> np.ndarray:
    """Validate control points and return them as a float array ``(..., O, D)``."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim < 2:
        raise InvalidPolygonError(f"control points need shape (..., O, D), got {pts.shape}")
    if pts.shape[-2] < 2:
        raise InvalidPolygonError(f"need at least 2 control points, got {pts.shape[-2]}")
    if not np.all(np.isfinite(pts)):
        raise InvalidPolygonError("control points must be finite")
    return pts


def _check_t(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        if DEBUG:
            raise AssertionError(f"curve parameter {t} outside [0, 1]")
        t = min(max(t, 0.0), 1.0)
    return t


def de_casteljau(points, t: float, check: bool = True) -> np.ndarray:
    """Evaluate B(points, t) by repeated linear interpolation.

    Pinned at the endpoints so that ``B(0)`` and ``B(1)`` are returned exactly.
    ``check=False`` skips validation for hot loops that already hold a float
    array of the right shape.
    """
    pts = as_polygon(points) if check else points
    t = _check_t(t)
    if t == 0.0:
        return pts[..., 0, :].copy()
    if t == 1.0:
        return pts[..., -1, :].copy()
    s = 1.0 - t
    # point axis first so every level is a contiguous block
    work = np.moveaxis(pts, -2, 0).copy()
    for j in range(work.shape[0] - 1, 0, -1):
        upper = t * work[1 : j + 1]
        work[:j] *= s
        work[:j] += upper
    return work[0]


def bernstein_basis(order: int, t: float) -> np.ndarray:
    """Weights ``C(n, i) (1-t)^(n-i) t^i`` for ``i = 0..n`` with ``n = order - 1``."""
    if order < 2:
        raise InvalidPolygonError(f"need at least 2 control points, got {order}")
    t = _check_t(t)
    n = order - 1
    i = np.arange(order)
    coef = np.array([comb(n, k) for k in range(order)], dtype=np.float64)
    return coef * (1.0 - t) ** (n - i) * t**i


def bernstein_eval(points, t: float) -> np.ndarray:
    """Direct power-basis evaluation; the reference for :func:`de_casteljau`."""
    pts = as_polygon(points)
    basis = bernstein_basis(pts.shape[-2], t)
    return np.einsum("i,...id->...d", basis, pts)


def derivative(points, t: float) -> np.ndarray:
    """Exact velocity dB/dt via the hodograph.

    B'(t) = n * sum_i (P[i+1] - P[i]) * b_{n-1,i}(t) with n = O - 1.
    """
    pts = as_polygon(points)
    n = pts.shape[-2] - 1
    diffs = pts[..., 1:, :] - pts[..., :-1, :]
    if n == 1:
        return diffs[..., 0, :].copy()
    return n * de_casteljau(diffs, t)


def canonicalize(points, mode: str = "none", check: bool = True) -> np.ndarray:
    """Fix the curve so the canonical frame sits at t = 0.

    ``none`` leaves the points alone, ``subtract_first`` shifts every point by
    -P[0] and ``pin_first_zero`` overwrites P[0] with the zero vector.
    """
    pts = as_polygon(points) if check else points
    if mode == "none":
        return pts
    if mode == "subtract_first":
        return pts - pts[..., :1, :]
    if mode == "pin_first_zero":
        out = pts.copy()
        out[..., 0, :] = 0.0
        return out
    raise ValueError(f"unknown canonical mode {mode!r}; expected one of {CANONICAL_MODES}")


def canonical_weights(order: int, t: float, mode: str = "none") -> np.ndarray:
    """Coefficients ``a`` with ``B(canonicalize(P, mode), t) == sum_i a[i] P[i]``.

    Curve evaluation is linear in the control points, so these are also the
    derivatives of the evaluated point with respect to each stored point.
    """
    a = bernstein_basis(order, t)
    if mode == "subtract_first":
        a[0] -= 1.0
    elif mode == "pin_first_zero":
        a[0] = 0.0
    elif mode != "none":
        raise ValueError(f"unknown canonical mode {mode!r}; expected one of {CANONICAL_MODES}")
    return a
