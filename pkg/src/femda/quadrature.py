"""Quadrature on the reference triangle and on line segments."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi


@dataclass(frozen=True)
class QuadratureRule:
    """Barycentric points ``(nq, 3)`` and weights on the reference triangle.

    Weights sum to the reference area 1/2; the rule is exact for polynomials
    of total degree ``degree``.
    """

    bary: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def n_points(self):
        return len(self.weights)


@lru_cache(maxsize=None)
def triangle_rule(degree):
    """Collapsed (Stroud conical) Gauss product rule of the requested degree.

    Uses Gauss-Jacobi(1, 0) in the collapsed direction and Gauss-Legendre in
    the other, so ``n = ceil((degree + 1) / 2)`` points per direction suffice.
    """
    if degree < 0:
        raise ValueError("degree must be non-negative")
    n = max(1, (degree + 2) // 2)
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    xl, wl = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (1.0 + xj)
    wx = 0.25 * wj
    s = 0.5 * (1.0 + xl)
    ws = 0.5 * wl
    X = np.repeat(x, n)
    S = np.tile(s, n)
    Y = (1.0 - X) * S
    W = np.repeat(wx, n) * np.tile(ws, n)
    bary = np.column_stack([1.0 - X - Y, X, Y])
    return QuadratureRule(bary, W, degree)


@lru_cache(maxsize=None)
def line_rule(n):
    """Gauss-Legendre points on [0, 1] with weights summing to 1."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w
