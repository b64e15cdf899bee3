"""Composite trapezoidal rule, plain and as weight operators for differentiable use."""

from __future__ import annotations

import numpy as np


def _check_grid(values, grid) -> tuple[np.ndarray, np.ndarray]:
    values = np.asarray(values, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or len(grid) < 2:
        raise ValueError("trapezoid needs a grid of at least two points")
    if values.shape[-1] != len(grid):
        raise ValueError(f"values ({values.shape[-1]}) and grid ({len(grid)}) lengths differ")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("trapezoid grid must be strictly increasing")
    return values, grid


def trapezoid(values, grid) -> float | np.ndarray:
    """Integral of ``values`` sampled on ``grid`` (last axis)."""
    values, grid = _check_grid(values, grid)
    return values @ trapezoid_weights(grid)


def cumulative_trapezoid(values, grid) -> np.ndarray:
    """Running integral from ``grid[0]``; first entry is 0."""
    values, grid = _check_grid(values, grid)
    h = np.diff(grid)
    pieces = 0.5 * h * (values[..., 1:] + values[..., :-1])
    out = np.zeros_like(values)
    out[..., 1:] = np.cumsum(pieces, axis=-1)
    return out


def trapezoid_weights(grid) -> np.ndarray:
    """Vector ``w`` with ``trapezoid(v, grid) == v @ w``."""
    grid = np.asarray(grid, dtype=np.float64)
    h = np.diff(grid)
    w = np.zeros(len(grid))
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def cumulative_trapezoid_matrix(grid) -> np.ndarray:
    """Matrix ``C`` with ``cumulative_trapezoid(v, grid) == v @ C``.

    Column ``k`` holds the trapezoid weights of the sub-grid ``grid[:k+1]``.
    """
    grid = np.asarray(grid, dtype=np.float64)
    n = len(grid)
    h = np.diff(grid)
    C = np.zeros((n, n))
    for k in range(1, n):
        C[:k, k] += 0.5 * h[:k]
        C[1:k + 1, k] += 0.5 * h[:k]
    return C
