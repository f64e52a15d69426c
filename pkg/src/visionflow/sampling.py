"""Bilinear sampling on regular grids, one convention shared everywhere.

A grid with ``h`` rows and ``w`` columns covers the continuous rectangle
``[0, h] x [0, w]`` in cell units: cell ``(i, j)`` occupies
``[i, i+1) x [j, j+1)`` and its value sits at the center ``(i+0.5, j+0.5)``.
Sampling at a continuous point ``(y, x)`` interpolates the four nearest cell
centers; coordinates are clamped to the center range (clamp-to-edge), so the
interpolation is always a convex combination of stored values.

Resizing maps output cell center ``i + 0.5`` to source coordinate
``(i + 0.5) * src_extent / out_extent`` (align_corners=False semantics,
no antialiasing). Image resizing, pyramid upsampling, and box feature
sampling all go through this module so their conventions cannot drift.
"""

from __future__ import annotations

import numpy as np


def corner_weights(
    h: int, w: int, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Corner indices and weights for bilinear sampling at ``points``.

    ``points`` is ``[P, 2]`` of (y, x) in cell units. Returns
    ``(i0, i1, j0, j1, weights)`` with ``weights`` of shape ``[P, 4]``
    ordered (w00, w01, w10, w11) for corners (i0,j0), (i0,j1), (i1,j0),
    (i1,j1). Weights are nonnegative and sum to 1 per point.
    """
    points = np.asarray(points, dtype=np.float64)
    py = np.clip(points[:, 0] - 0.5, 0.0, float(h - 1))
    px = np.clip(points[:, 1] - 0.5, 0.0, float(w - 1))
    i0 = np.minimum(np.floor(py).astype(np.int64), h - 1)
    j0 = np.minimum(np.floor(px).astype(np.int64), w - 1)
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    fy = py - i0
    fx = px - j0
    weights = np.stack(
        [(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=1
    )
    return i0, i1, j0, j1, weights


def sample_grid(grid: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Bilinearly sample ``grid`` ([h, w, C]) at ``points`` ([P, 2]) -> [P, C]."""
    h, w = grid.shape[0], grid.shape[1]
    i0, i1, j0, j1, wts = corner_weights(h, w, points)
    out = (
        grid[i0, j0] * wts[:, 0:1]
        + grid[i0, j1] * wts[:, 1:2]
        + grid[i1, j0] * wts[:, 2:3]
        + grid[i1, j1] * wts[:, 3:4]
    )
    return out


def center_points(out_h: int, out_w: int, scale_y: float, scale_x: float) -> np.ndarray:
    """Source-space sample points for a resized grid, row-major [out_h*out_w, 2]."""
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * scale_y
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * scale_x
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy.ravel(), xx.ravel()], axis=1)


def resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly resize ``grid`` ([h, w, C]) to ``[out_h, out_w, C]``."""
    h, w = grid.shape[0], grid.shape[1]
    pts = center_points(out_h, out_w, h / out_h, w / out_w)
    flat = sample_grid(grid, pts)
    return flat.reshape(out_h, out_w, grid.shape[2])


def box_sample_points(
    x0: float, y0: float, x1: float, y1: float, bins: tuple[int, int], samples: int
) -> np.ndarray:
    """Sample points for box feature extraction, in grid cell units.

    The box is divided into ``bins = (b_h, b_w)`` equal bins; each bin is
    sampled at an ``samples x samples`` regular interior lattice: sample
    ``(si, sj)`` of bin ``(bi, bj)`` lies at
    ``y0 + bin_h * (bi + (si + 0.5) / samples)`` (and likewise in x), so a
    1x1 bin with one sample reads exactly the box center. Points are ordered
    (bi, bj, si, sj) row-major, shape ``[b_h*b_w*samples*samples, 2]``.
    """
    b_h, b_w = bins
    bin_h = (y1 - y0) / b_h
    bin_w = (x1 - x0) / b_w
    offs = (np.arange(samples, dtype=np.float64) + 0.5) / samples
    ys = y0 + bin_h * (np.arange(b_h, dtype=np.float64)[:, None] + offs[None, :])
    xs = x0 + bin_w * (np.arange(b_w, dtype=np.float64)[:, None] + offs[None, :])
    # [b_h, b_w, s, s] grids of y and x, then flatten in (bi, bj, si, sj) order
    yy = np.broadcast_to(ys[:, None, :, None], (b_h, b_w, samples, samples))
    xx = np.broadcast_to(xs[None, :, None, :], (b_h, b_w, samples, samples))
    return np.stack([yy.ravel(), xx.ravel()], axis=1)
