"""Fixed sinusoidal position encodings, 1D for sequences and 2D for grids."""

from __future__ import annotations

import numpy as np

_CACHE_1D = {}
_CACHE_2D = {}


def sine_table_1d(length, d):
    """Classic transformer table: sin on even channels, cos on odd ones."""
    if d % 2:
        raise ValueError(f"1D sine table needs an even width, got {d}")
    key = (length, d)
    hit = _CACHE_1D.get(key)
    if hit is None:
        pos = np.arange(length, dtype=np.float64)[:, None]
        freq = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
        table = np.empty((length, d))
        table[:, 0::2] = np.sin(pos * freq)
        table[:, 1::2] = np.cos(pos * freq)
        hit = _CACHE_1D[key] = table
    return hit


def sine_grid_2d(h, w, d):
    """2D grid encoding: first half of the channels encode the row coordinate,
    second half the column, each as interleaved sin/cos over geometric
    frequencies of the raw integer coordinate."""
    if d % 4:
        raise ValueError(f"2D sine grid needs width divisible by 4, got {d}")
    key = (h, w, d)
    hit = _CACHE_2D.get(key)
    if hit is None:
        half = d // 2
        dim_t = 10000.0 ** (2.0 * (np.arange(half) // 2) / half)
        ey = _interleave(np.arange(h, dtype=np.float64)[:, None] / dim_t)
        ex = _interleave(np.arange(w, dtype=np.float64)[:, None] / dim_t)
        grid = np.empty((h, w, d))
        grid[..., :half] = ey[:, None, :]
        grid[..., half:] = ex[None, :, :]
        hit = _CACHE_2D[key] = grid
    return hit


def _interleave(angles):
    out = np.empty_like(angles)
    out[:, 0::2] = np.sin(angles[:, 0::2])
    out[:, 1::2] = np.cos(angles[:, 1::2])
    return out
