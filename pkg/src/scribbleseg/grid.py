"""Core 3D grid types: volumes, label maps, probability maps and scribbles.

All dense buffers use one canonical linear layout: x fastest, then y, then z
(``index = x + nx * (y + ny * z)``).  A buffer reshaped to ``(nz, ny, nx)`` in
C order is a zero-copy 3D view of that layout, so grid views are always
indexed ``[z, y, x]``.  Every other module indexes through this one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ValidationError

Dims = tuple[int, int, int]
Spacing = tuple[float, float, float]


def voxel_count(dims: Dims) -> int:
    nx, ny, nz = dims
    return nx * ny * nz


def linear_index(coord: tuple[int, int, int], dims: Dims) -> int:
    """Linear index of ``(x, y, z)`` in the canonical x-fastest layout."""
    x, y, z = coord
    nx, ny, nz = dims
    if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
        raise IndexError(f"coordinate {coord} out of bounds for dims {dims}")
    return x + nx * (y + ny * z)


def coord_of(index: int, dims: Dims) -> tuple[int, int, int]:
    """Inverse of :func:`linear_index`."""
    nx, ny, nz = dims
    n = nx * ny * nz
    if not 0 <= index < n:
        raise IndexError(f"linear index {index} out of bounds for dims {dims}")
    x = index % nx
    y = (index // nx) % ny
    z = index // (nx * ny)
    return x, y, z


def _check_dims(dims: Dims) -> None:
    if len(dims) != 3 or any(int(d) != d or d <= 0 for d in dims):
        raise ValidationError(f"dims must be three positive integers, got {dims!r}")


@dataclass(frozen=True)
class Volume:
    """A dense 3D scalar field with voxel spacing in millimetres."""

    dims: Dims
    spacing: Spacing
    data: np.ndarray = field(repr=False)
    intensity_range: tuple[float, float] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        _check_dims(self.dims)
        if any(s <= 0 for s in self.spacing):
            raise ValidationError(f"spacing must be strictly positive, got {self.spacing!r}")
        data = np.ascontiguousarray(self.data, dtype=np.float32).reshape(-1)
        if data.size != voxel_count(self.dims):
            raise ValidationError(
                f"data length {data.size} != nx*ny*nz = {voxel_count(self.dims)}"
            )
        if not np.all(np.isfinite(data)):
            raise ValidationError("volume data contains non-finite values")
        object.__setattr__(self, "data", data)
        lo, hi = float(data.min()), float(data.max())
        object.__setattr__(self, "intensity_range", (lo, hi))

    @property
    def grid(self) -> np.ndarray:
        """Zero-copy ``(nz, ny, nx)`` view, indexed ``[z, y, x]``."""
        nx, ny, nz = self.dims
        return self.data.reshape(nz, ny, nx)

    @classmethod
    def from_grid(cls, grid_zyx: np.ndarray, spacing: Spacing = (1.0, 1.0, 1.0)) -> "Volume":
        nz, ny, nx = grid_zyx.shape
        return cls((nx, ny, nz), spacing, np.asarray(grid_zyx).reshape(-1))


@dataclass(frozen=True)
class LabelMap:
    """Binary per-voxel labels: 0 background, 1 foreground."""

    dims: Dims
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        _check_dims(self.dims)
        labels = np.ascontiguousarray(self.labels).reshape(-1)
        if labels.size != voxel_count(self.dims):
            raise ValidationError(
                f"label length {labels.size} != nx*ny*nz = {voxel_count(self.dims)}"
            )
        values = np.unique(labels)
        if not np.all(np.isin(values, (0, 1))):
            raise ValidationError(f"labels must be 0 or 1, found values {values[:8]!r}")
        object.__setattr__(self, "labels", labels.astype(np.uint8))

    @property
    def grid(self) -> np.ndarray:
        nx, ny, nz = self.dims
        return self.labels.reshape(nz, ny, nx)

    @classmethod
    def from_grid(cls, grid_zyx: np.ndarray) -> "LabelMap":
        nz, ny, nx = grid_zyx.shape
        return cls((nx, ny, nz), np.asarray(grid_zyx).reshape(-1))

    def foreground_count(self) -> int:
        return int(np.count_nonzero(self.labels))


@dataclass(frozen=True)
class ProbMap:
    """Per-voxel foreground probability in [0, 1]."""

    dims: Dims
    prob: np.ndarray = field(repr=False)

    def __post_init__(self):
        _check_dims(self.dims)
        prob = np.ascontiguousarray(self.prob, dtype=np.float32).reshape(-1)
        if prob.size != voxel_count(self.dims):
            raise ValidationError(
                f"probability length {prob.size} != nx*ny*nz = {voxel_count(self.dims)}"
            )
        if not np.all(np.isfinite(prob)) or prob.min() < 0.0 or prob.max() > 1.0:
            raise ValidationError("probabilities must be finite and within [0, 1]")
        object.__setattr__(self, "prob", prob)

    @property
    def grid(self) -> np.ndarray:
        nx, ny, nz = self.dims
        return self.prob.reshape(nz, ny, nx)

    def argmax_labels(self) -> LabelMap:
        """Threshold at 0.5 (ties go to background, matching two-logit argmax)."""
        return LabelMap(self.dims, (self.prob > 0.5).astype(np.uint8))


class ScribbleSet:
    """Sparse user corrections: disjoint foreground/background voxel index sets.

    Adding a voxel to one class removes it from the other (last write wins),
    so the disjointness invariant holds through any sequence of edits.
    """

    def __init__(self, dims: Dims, foreground: Iterable[int] = (), background: Iterable[int] = ()):
        _check_dims(dims)
        self.dims = dims
        fg = set(int(i) for i in foreground)
        bg = set(int(i) for i in background)
        overlap = fg & bg
        if overlap:
            raise ValidationError(f"foreground and background scribbles overlap at {sorted(overlap)[:8]}")
        n = voxel_count(dims)
        for idx in fg | bg:
            if not 0 <= idx < n:
                raise ValidationError(f"scribble index {idx} out of bounds for dims {dims}")
        self.foreground: set[int] = fg
        self.background: set[int] = bg

    def _check(self, index: int) -> int:
        index = int(index)
        if not 0 <= index < voxel_count(self.dims):
            raise ValidationError(f"scribble index {index} out of bounds for dims {self.dims}")
        return index

    def add_foreground(self, index: int) -> None:
        index = self._check(index)
        self.background.discard(index)
        self.foreground.add(index)

    def add_background(self, index: int) -> None:
        index = self._check(index)
        self.foreground.discard(index)
        self.background.add(index)

    def remove(self, index: int) -> None:
        self.foreground.discard(int(index))
        self.background.discard(int(index))

    def update(self, other: "ScribbleSet") -> None:
        """Merge another set in, other's assignments winning on conflict."""
        if other.dims != self.dims:
            raise ValidationError(f"dims mismatch: {other.dims} vs {self.dims}")
        for idx in other.foreground:
            self.add_foreground(idx)
        for idx in other.background:
            self.add_background(idx)

    def union(self) -> set[int]:
        return self.foreground | self.background

    def __len__(self) -> int:
        return len(self.foreground) + len(self.background)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ScribbleSet)
            and self.dims == other.dims
            and self.foreground == other.foreground
            and self.background == other.background
        )

    def copy(self) -> "ScribbleSet":
        return ScribbleSet(self.dims, self.foreground, self.background)


def normalize_volume(v: Volume) -> Volume:
    """Affine rescale of intensities to [0, 1]; a constant volume maps to zeros.

    Intensity-scale constants elsewhere (geodesic costs, graph-cut contrast
    sigma) assume inputs normalized by this function.
    """
    lo, hi = v.intensity_range
    if hi > lo:
        data = (v.data - np.float32(lo)) / np.float32(hi - lo)
    else:
        data = np.zeros_like(v.data)
    return Volume(v.dims, v.spacing, data)
