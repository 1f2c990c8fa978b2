/** Wire types of the refinement service plus viewer-side geometry. */

export type Axis = "x" | "y" | "z";
export type Layer = "image" | "labels" | "result" | "weights";
export type BrushKind = "foreground" | "background" | "erase";

export interface Dims {
  nx: number;
  ny: number;
  nz: number;
}

export interface Voxel {
  x: number;
  y: number;
  z: number;
}

/** Fractional position on the current slice plane (row/col cell units). */
export interface PlanePoint {
  row: number;
  col: number;
}

export interface SessionInfo {
  id: string;
  dims: [number, number, number];
  spacing: [number, number, number];
  round: number;
  status: string;
  scribbles: { foreground: number; background: number };
  has_result: boolean;
  has_ground_truth: boolean;
}

export interface SliceMeta {
  axis: Axis;
  index: number;
  layer: Layer;
  rows: number;
  cols: number;
  dtype: "float32" | "uint8";
}

export interface SlicePlane {
  meta: SliceMeta;
  data: Float32Array | Uint8Array;
}

export interface StageTimings {
  weights: number;
  train: number;
  infer: number;
  graphcut: number;
}

export interface RoundMetrics {
  dice: number | null;
  assd: number | null;
}

export interface RefineResponse {
  round: number;
  timings: StageTimings;
  changed_voxels: number;
  scribble_voxels: number;
  metrics: RoundMetrics | null;
}

export interface ScribbleCounts {
  foreground: number;
  background: number;
}

export interface ScribblePayload {
  foreground?: [number, number, number][];
  background?: [number, number, number][];
  erase?: [number, number, number][];
}

export const voxelKey = (v: Voxel): string => `${v.x},${v.y},${v.z}`;

