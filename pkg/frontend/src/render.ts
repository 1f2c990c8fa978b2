/** Pure pixel functions: planes to RGBA buffers (canvas-free, testable). */

import type { SlicePlane, Voxel } from "./types.js";

export const COLORS = {
  foregroundScribble: [34, 197, 94, 255] as const, // green
  backgroundScribble: [59, 130, 246, 255] as const, // blue
  resultMask: [239, 68, 68, 110] as const, // translucent red
  pendingForeground: [134, 239, 172, 255] as const,
  pendingBackground: [147, 197, 253, 255] as const,
};

/** Grayscale with window/level applied; width in normalized intensity units. */
export function imageToRgba(plane: SlicePlane, level: number, width: number): Uint8ClampedArray {
  const { rows, cols } = plane.meta;
  const out = new Uint8ClampedArray(rows * cols * 4);
  const lo = level - width / 2;
  const scale = 255 / Math.max(width, 1e-6);
  for (let i = 0; i < rows * cols; i++) {
    const value = (Number(plane.data[i]) - lo) * scale;
    out[4 * i] = value;
    out[4 * i + 1] = value;
    out[4 * i + 2] = value;
    out[4 * i + 3] = 255;
  }
  return out;
}

/** Overlay the result mask (label 1) in translucent red. */
export function blendResult(base: Uint8ClampedArray, plane: SlicePlane): void {
  const [r, g, b, a] = COLORS.resultMask;
  const alpha = a / 255;
  for (let i = 0; i < plane.data.length; i++) {
    if (plane.data[i] === 1) {
      base[4 * i] = base[4 * i] * (1 - alpha) + r * alpha;
      base[4 * i + 1] = base[4 * i + 1] * (1 - alpha) + g * alpha;
      base[4 * i + 2] = base[4 * i + 2] * (1 - alpha) + b * alpha;
    }
  }
}

/** Overlay synced scribbles from the labels layer (codes 2 and 3). */
export function blendScribbles(base: Uint8ClampedArray, plane: SlicePlane): void {
  for (let i = 0; i < plane.data.length; i++) {
    const code = plane.data[i];
    if (code === 3) paint(base, i, COLORS.foregroundScribble);
    else if (code === 2) paint(base, i, COLORS.backgroundScribble);
  }
}

/** Heat overlay of the geodesic supervision weights (0 transparent, 1 hot). */
export function blendWeights(base: Uint8ClampedArray, plane: SlicePlane): void {
  for (let i = 0; i < plane.data.length; i++) {
    const w = Number(plane.data[i]);
    if (w <= 0) continue;
    const alpha = Math.min(w, 1) * 0.6;
    base[4 * i] = base[4 * i] * (1 - alpha) + 255 * alpha;
    base[4 * i + 1] = base[4 * i + 1] * (1 - alpha) + 176 * alpha * w;
    base[4 * i + 2] = base[4 * i + 2] * (1 - alpha);
  }
}

/** Pending (unsynced) strokes, lighter tint so sync state stays visible. */
export function blendPending(
  base: Uint8ClampedArray,
  cols: number,
  foreground: Array<[number, number]>,
  background: Array<[number, number]>,
): void {
  for (const [row, col] of foreground) paint(base, row * cols + col, COLORS.pendingForeground);
  for (const [row, col] of background) paint(base, row * cols + col, COLORS.pendingBackground);
}

function paint(base: Uint8ClampedArray, index: number, color: readonly [number, number, number, number]): void {
  base[4 * index] = color[0];
  base[4 * index + 1] = color[1];
  base[4 * index + 2] = color[2];
  base[4 * index + 3] = 255;
}

/** Project a voxel back to (row, col) on a given plane; null if off-plane. */
export function voxelToPlaneCell(
  voxel: Voxel,
  axis: "x" | "y" | "z",
  index: number,
): [number, number] | null {
  if (axis === "z") return voxel.z === index ? [voxel.y, voxel.x] : null;
  if (axis === "y") return voxel.y === index ? [voxel.z, voxel.x] : null;
  return voxel.x === index ? [voxel.z, voxel.y] : null;
}
