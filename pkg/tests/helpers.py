"""Plain helper constructors shared across test modules."""

import numpy as np

from scribbleseg import LabelMap, ScribbleSet, Volume, linear_index


def random_volume(dims, seed=0, spacing=(1.0, 1.0, 1.0)):
    gen = np.random.default_rng(seed)
    nx, ny, nz = dims
    return Volume(dims, spacing, gen.random(nx * ny * nz, dtype=np.float64).astype(np.float32))


def cube_labels(dims, lo, hi):
    """Axis-aligned solid cube [lo, hi) on each axis as a LabelMap."""
    nx, ny, nz = dims
    grid = np.zeros((nz, ny, nx), dtype=np.uint8)
    grid[lo[2] : hi[2], lo[1] : hi[1], lo[0] : hi[0]] = 1
    return LabelMap(dims, grid.reshape(-1))


def scribbles_from_coords(dims, fg=(), bg=()):
    s = ScribbleSet(dims)
    for c in fg:
        s.add_foreground(linear_index(c, dims))
    for c in bg:
        s.add_background(linear_index(c, dims))
    return s
