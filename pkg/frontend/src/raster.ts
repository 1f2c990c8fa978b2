/** Stroke rasterization and slice-plane <-> voxel geometry.
 *
 * Plane orientation matches the service's slice endpoint:
 *   axis z -> rows are y, cols are x
 *   axis y -> rows are z, cols are x
 *   axis x -> rows are z, cols are y
 *
 * Cell (row, col) spans [row, row+1) x [col, col+1) with center at +0.5.
 */

import type { Axis, Dims, PlanePoint, Voxel } from "./types.js";

export function planeShape(axis: Axis, dims: Dims): { rows: number; cols: number } {
  switch (axis) {
    case "z":
      return { rows: dims.ny, cols: dims.nx };
    case "y":
      return { rows: dims.nz, cols: dims.nx };
    case "x":
      return { rows: dims.nz, cols: dims.ny };
  }
}

export function sliceCount(axis: Axis, dims: Dims): number {
  return axis === "z" ? dims.nz : axis === "y" ? dims.ny : dims.nx;
}

export function planeCellToVoxel(axis: Axis, index: number, row: number, col: number): Voxel {
  switch (axis) {
    case "z":
      return { x: col, y: row, z: index };
    case "y":
      return { x: col, y: index, z: row };
    case "x":
      return { x: index, y: col, z: row };
  }
}

/** Cells covered by one brush stamp at a fractional plane point.
 *
 * Radius 1 paints exactly the cell under the pointer; larger radii add every
 * cell whose center lies strictly within (radius - 0.5) of the point.
 * Out-of-plane cells are clipped.
 */
export function stampCells(point: PlanePoint, radius: number, rows: number, cols: number): [number, number][] {
  const cells: [number, number][] = [];
  const seen = new Set<number>();
  const push = (row: number, col: number) => {
    if (row < 0 || col < 0 || row >= rows || col >= cols) return;
    const key = row * cols + col;
    if (!seen.has(key)) {
      seen.add(key);
      cells.push([row, col]);
    }
  };
  push(Math.floor(point.row), Math.floor(point.col));
  if (radius > 1) {
    const reach = radius - 0.5;
    const r0 = Math.max(0, Math.floor(point.row - reach));
    const r1 = Math.min(rows - 1, Math.ceil(point.row + reach));
    const c0 = Math.max(0, Math.floor(point.col - reach));
    const c1 = Math.min(cols - 1, Math.ceil(point.col + reach));
    for (let r = r0; r <= r1; r++) {
      for (let c = c0; c <= c1; c++) {
        const dr = r + 0.5 - point.row;
        const dc = c + 0.5 - point.col;
        if (dr * dr + dc * dc < reach * reach) push(r, c);
      }
    }
  }
  return cells;
}

/** Rasterize a pointer path: stamps along each segment at sub-cell steps. */
export function rasterizeStroke(
  path: PlanePoint[],
  radius: number,
  rows: number,
  cols: number,
): [number, number][] {
  if (path.length === 0) return [];
  const cells: [number, number][] = [];
  const seen = new Set<number>();
  const take = (stamped: [number, number][]) => {
    for (const [r, c] of stamped) {
      const key = r * cols + c;
      if (!seen.has(key)) {
        seen.add(key);
        cells.push([r, c]);
      }
    }
  };
  take(stampCells(path[0], radius, rows, cols));
  for (let i = 1; i < path.length; i++) {
    const a = path[i - 1];
    const b = path[i];
    const dist = Math.hypot(b.row - a.row, b.col - a.col);
    const steps = Math.max(1, Math.ceil(dist / 0.5));
    for (let s = 1; s <= steps; s++) {
      const t = s / steps;
      take(stampCells({ row: a.row + t * (b.row - a.row), col: a.col + t * (b.col - a.col) }, radius, rows, cols));
    }
  }
  return cells;
}

/** Full stroke: pointer path on the current slice to volume voxels. */
export function strokeToVoxels(
  path: PlanePoint[],
  radius: number,
  axis: Axis,
  index: number,
  dims: Dims,
): Voxel[] {
  const { rows, cols } = planeShape(axis, dims);
  return rasterizeStroke(path, radius, rows, cols).map(([row, col]) => planeCellToVoxel(axis, index, row, col));
}
