"""Intensity-geodesic distance from scribbles and the supervision weight map.

The distance between neighboring voxels accumulates intensity change,
``|I(i) - I(j)| + nu * ||dx||`` (``nu`` defaults to 0, the pure-intensity
metric; ``||dx||`` is the Euclidean step length in voxel units, spacing is
not applied).  Distance of a voxel to a scribble set is the minimum path
cost to any seed, and the weight map is ``exp(-D / tau)``: 1 on seeds,
decaying with distance, exactly 0 where D is infinite (empty seed set).

Two solvers over the identical discrete graph:

* :func:`geodesic_distance` - raster-scan sweeps, an upper bound that
  converges to the exact distance as passes increase.  One pass is a full
  sweep cycle: a forward and a backward traversal in each of the three axis
  orders (six grid traversals), relaxing each voxel from the causal half of
  its neighborhood with values already updated within the traversal.  Single
  fixed-order sweep pairs converge slowly when geodesics wiggle (they only
  capture paths that are monotone in scan order); rotating the scan axis
  captures the rest, and four cycles are indistinguishable from exact on
  random test volumes.  This is the production path.
* :func:`geodesic_distance_exact` - priority-queue shortest path, the test
  oracle, guarded to small grids.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Iterable, Union

import numpy as np

from .errors import GridTooLargeError, ValidationError
from .grid import Dims, ScribbleSet, Volume, voxel_count

SeedsLike = Union[ScribbleSet, Iterable[int]]


@dataclass(frozen=True)
class GeodesicConfig:
    tau: float = 0.3
    connectivity: int = 26
    passes: int = 4
    spatial_weight: float = 0.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")
        if self.connectivity not in (6, 26):
            raise ValidationError(f"connectivity must be 6 or 26, got {self.connectivity}")
        if self.passes < 1:
            raise ValidationError(f"passes must be >= 1, got {self.passes}")
        if self.spatial_weight < 0:
            raise ValidationError(f"spatial_weight must be >= 0, got {self.spatial_weight}")


@dataclass(frozen=True)
class DistanceMap:
    dims: Dims
    dist: np.ndarray = field(repr=False)  # f64, +inf where unreachable

    @property
    def grid(self) -> np.ndarray:
        nx, ny, nz = self.dims
        return self.dist.reshape(nz, ny, nx)


@dataclass(frozen=True)
class WeightMap:
    dims: Dims
    w: np.ndarray = field(repr=False)  # f64 in [0, 1]

    @property
    def grid(self) -> np.ndarray:
        nx, ny, nz = self.dims
        return self.w.reshape(nz, ny, nx)


def seed_indices(seeds: SeedsLike) -> np.ndarray:
    if isinstance(seeds, ScribbleSet):
        idx = sorted(seeds.union())
    else:
        idx = sorted(int(i) for i in seeds)
    return np.asarray(idx, dtype=np.int64)


def _shift2(plane: np.ndarray, dy: int, dx: int, fill: float) -> np.ndarray:
    """out[y, x] = plane[y + dy, x + dx], `fill` outside."""
    ny, nx = plane.shape
    out = np.full((ny, nx), fill, dtype=plane.dtype)
    ys = slice(max(0, -dy), ny - max(0, dy))
    yr = slice(max(0, dy), ny - max(0, -dy))
    xs = slice(max(0, -dx), nx - max(0, dx))
    xr = slice(max(0, dx), nx - max(0, -dx))
    out[ys, xs] = plane[yr, xr]
    return out


def _shift1(row: np.ndarray, dx: int, fill: float) -> np.ndarray:
    nx = row.shape[0]
    out = np.full(nx, fill, dtype=row.dtype)
    if dx == 0:
        out[:] = row
    elif dx > 0:
        out[: nx - dx] = row[dx:]
    else:
        out[-dx:] = row[: nx + dx]
    return out


def _sweep(d: np.ndarray, intensity: np.ndarray, nu: float, connectivity: int, reverse: bool) -> None:
    """One raster-scan pass in place; relaxes each voxel from the causal
    half of its neighborhood, using values already updated this pass."""
    nz, ny, nx = d.shape
    plane_offsets = (
        [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)] if connectivity == 26 else [(0, 0)]
    )
    row_offsets = [-1, 0, 1] if connectivity == 26 else [0]
    z_iter = range(nz - 1, -1, -1) if reverse else range(nz)
    dz = 1 if reverse else -1
    dy_row = 1 if reverse else -1

    for z in z_iter:
        cur = d[z]
        cur_i = intensity[z]
        zn = z + dz
        if 0 <= zn < nz:
            prev = d[zn]
            prev_i = intensity[zn]
            for dy, dx in plane_offsets:
                step = nu * math.sqrt(1 + dy * dy + dx * dx)
                cand = _shift2(prev, dy, dx, np.inf) + np.abs(cur_i - _shift2(prev_i, dy, dx, 0.0)) + step
                np.minimum(cur, cand, out=cur)
        y_iter = range(ny - 1, -1, -1) if reverse else range(ny)
        for y in y_iter:
            drow = cur[y]
            irow = cur_i[y]
            yn = y + dy_row
            if 0 <= yn < ny:
                prow = cur[yn]
                pirow = cur_i[yn]
                for dx in row_offsets:
                    step = nu * math.sqrt(1 + dx * dx)
                    cand = _shift1(prow, dx, np.inf) + np.abs(irow - _shift1(pirow, dx, 0.0)) + step
                    np.minimum(drow, cand, out=drow)
            # in-row scan is sequential; plain floats beat numpy scalar indexing
            vals = drow.tolist()
            costs = (np.abs(np.diff(irow)) + nu).tolist()
            if reverse:
                for x in range(nx - 2, -1, -1):
                    v = vals[x + 1] + costs[x]
                    if v < vals[x]:
                        vals[x] = v
            else:
                for x in range(1, nx):
                    v = vals[x - 1] + costs[x - 1]
                    if v < vals[x]:
                        vals[x] = v
            drow[:] = vals


# Axis priorities visited within one pass; permutation of the (z, y, x) view.
_SWEEP_ORDERS = ((0, 1, 2), (1, 2, 0), (2, 0, 1))


def geodesic_distance(v: Volume, seeds: SeedsLike, cfg: GeodesicConfig = GeodesicConfig()) -> DistanceMap:
    """Raster-scan geodesic distance to the seed set; all +inf for no seeds."""
    n = voxel_count(v.dims)
    idx = seed_indices(seeds)
    if idx.size and (idx[0] < 0 or idx[-1] >= n):
        raise ValidationError("seed index out of bounds")
    dist = np.full(n, np.inf, dtype=np.float64)
    if idx.size == 0:
        return DistanceMap(v.dims, dist)
    dist[idx] = 0.0
    nx, ny, nz = v.dims
    d3 = dist.reshape(nz, ny, nx)
    i3 = v.grid.astype(np.float64)
    for _ in range(cfg.passes):
        for order in _SWEEP_ORDERS:
            dv = d3.transpose(order)
            iv = i3.transpose(order)
            _sweep(dv, iv, cfg.spatial_weight, cfg.connectivity, reverse=False)
            _sweep(dv, iv, cfg.spatial_weight, cfg.connectivity, reverse=True)
    return DistanceMap(v.dims, dist)


_ORACLE_MAX_VOXELS = 64 ** 3


def _offsets(connectivity: int) -> list[tuple[int, int, int, float]]:
    offs = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if (dx, dy, dz) == (0, 0, 0):
                    continue
                if connectivity == 6 and abs(dx) + abs(dy) + abs(dz) != 1:
                    continue
                offs.append((dx, dy, dz, math.sqrt(dx * dx + dy * dy + dz * dz)))
    return offs


def geodesic_distance_exact(v: Volume, seeds: SeedsLike, cfg: GeodesicConfig = GeodesicConfig()) -> DistanceMap:
    """Exact multi-seed shortest path on the same weighted graph (oracle)."""
    n = voxel_count(v.dims)
    if n > _ORACLE_MAX_VOXELS:
        raise GridTooLargeError(f"exact solver limited to {_ORACLE_MAX_VOXELS} voxels, got {n}")
    nx, ny, nz = v.dims
    idx = seed_indices(seeds)
    if idx.size and (idx[0] < 0 or idx[-1] >= n):
        raise ValidationError("seed index out of bounds")
    dist = np.full(n, np.inf, dtype=np.float64)
    if idx.size == 0:
        return DistanceMap(v.dims, dist)
    intensity = v.data.astype(np.float64)
    nu = cfg.spatial_weight
    offs = [(dx + nx * (dy + ny * dz), dx, dy, dz, norm) for dx, dy, dz, norm in _offsets(cfg.connectivity)]

    dist[idx] = 0.0
    heap: list[tuple[float, int]] = [(0.0, int(i)) for i in idx]
    heapq.heapify(heap)
    pop = heapq.heappop
    push = heapq.heappush
    while heap:
        dv, i = pop(heap)
        if dv > dist[i]:
            continue
        x = i % nx
        y = (i // nx) % ny
        z = i // (nx * ny)
        for delta, dx, dy, dz, norm in offs:
            xj = x + dx
            yj = y + dy
            zj = z + dz
            if not (0 <= xj < nx and 0 <= yj < ny and 0 <= zj < nz):
                continue
            j = i + delta
            nd = dv + abs(intensity[i] - intensity[j]) + nu * norm
            if nd < dist[j]:
                dist[j] = nd
                push(heap, (nd, j))
    return DistanceMap(v.dims, dist)


def weights_from_distance(d: DistanceMap, tau: float) -> WeightMap:
    """Supervision weights ``exp(-D / tau)``; infinite distance maps to 0."""
    if tau <= 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    with np.errstate(over="ignore"):
        w = np.exp(-d.dist / tau)
    return WeightMap(d.dims, w)


def scribble_weights(v: Volume, scribbles: ScribbleSet, cfg: GeodesicConfig = GeodesicConfig()) -> WeightMap:
    """Distance-then-weights convenience used by the refinement pipeline."""
    return weights_from_distance(geodesic_distance(v, scribbles, cfg), cfg.tau)
