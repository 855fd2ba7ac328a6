"""Separable Gaussian smoothing with truncated, boundary-renormalized kernels.

The kernel is cut at +-4 sigma. At positions where the window overhangs the
grid, the surviving taps are renormalized to sum to one, so every output is a
convex combination of inputs and constant maps pass through unchanged.

Each 1-D pass is represented as a dense row-stochastic matrix, which keeps the
adjoint (for weight gradients) and the analytic sigma-derivative of every
kernel entry exact and easy to audit.
"""

from __future__ import annotations

import numpy as np


def kernel_radius(sigma: float) -> int:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return max(1, int(np.ceil(4.0 * sigma)))


def blur_operator(n: int, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """1-D blur matrix A (n x n) and its elementwise derivative dA/dsigma.

    A[i, i+j] = g_j / S(i) for in-bounds offsets j in [-R, R], where
    g_j = exp(-j^2 / (2 sigma^2)) and S(i) renormalizes the surviving taps.
    """
    radius = kernel_radius(sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(offsets**2) / (2.0 * sigma**2))
    dg = g * (offsets**2) / sigma**3

    a = np.zeros((n, n))
    da = np.zeros((n, n))
    for i in range(n):
        j0 = max(-radius, -i)
        j1 = min(radius, n - 1 - i)
        sel = slice(j0 + radius, j1 + radius + 1)
        cols = slice(i + j0, i + j1 + 1)
        gs = g[sel]
        s = gs.sum()
        ds = dg[sel].sum()
        row = gs / s
        a[i, cols] = row
        da[i, cols] = (dg[sel] - row * ds) / s
    return a, da


class SeparableBlur:
    """Renormalized Gaussian blur on an (height, width) grid at one sigma."""

    def __init__(self, height: int, width: int, sigma: float):
        self.sigma = float(sigma)
        self.a_rows, self.da_rows = blur_operator(height, sigma)
        if width == height:
            self.a_cols, self.da_cols = self.a_rows, self.da_rows
        else:
            self.a_cols, self.da_cols = blur_operator(width, sigma)

    def apply(self, u: np.ndarray) -> np.ndarray:
        return self.a_rows @ u @ self.a_cols.T

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        """Transpose operator, for backpropagating through `apply`."""
        return self.a_rows.T @ g @ self.a_cols

    def sigma_derivative(self, u: np.ndarray) -> np.ndarray:
        """d(apply(u))/dsigma at fixed u, by the product rule over both axes."""
        return self.da_rows @ u @ self.a_cols.T + self.a_rows @ u @ self.da_cols.T


def blur(u: np.ndarray, sigma: float) -> np.ndarray:
    """One-off blur of a 2-D map."""
    u = np.asarray(u, dtype=np.float64)
    return SeparableBlur(u.shape[0], u.shape[1], sigma).apply(u)
