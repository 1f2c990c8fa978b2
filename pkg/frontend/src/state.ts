/** Viewer state: slice position, brush, overlays, pending strokes, refine status.
 *
 * Pending scribbles live in three disjoint maps (foreground, background,
 * erase); painting a voxel moves it to the active brush's map so the last
 * stroke wins locally, mirroring the server's last-write-wins semantics.
 * The state never edits fetched label planes: masks shown in the viewer are
 * always whatever the service returned last.
 */

import { sliceCount } from "./raster.js";
import type { Axis, BrushKind, Dims, RefineResponse, Voxel } from "./types.js";
import { voxelKey } from "./types.js";

export interface PendingEdit {
  foreground: Voxel[];
  background: Voxel[];
  erase: Voxel[];
}

export class ViewerState {
  sessionId: string | null = null;
  dims: Dims | null = null;
  axis: Axis = "z";
  sliceIndex = 0;
  windowLevel = 0.5;
  windowWidth = 1.0;
  brush: BrushKind = "foreground";
  brushRadius = 1;
  overlays: Record<"result" | "scribbles" | "weights", boolean> = {
    result: true,
    scribbles: true,
    weights: false,
  };
  refining = false;
  overlayVersion = 0;
  lastRefine: RefineResponse | null = null;
  lastError: string | null = null;
  scribbleCounts = { foreground: 0, background: 0 };

  private pendingForeground = new Map<string, Voxel>();
  private pendingBackground = new Map<string, Voxel>();
  private pendingErase = new Map<string, Voxel>();

  connect(sessionId: string, dims: Dims): void {
    this.sessionId = sessionId;
    this.dims = dims;
    this.sliceIndex = Math.floor(sliceCount(this.axis, dims) / 2);
  }

  setAxis(axis: Axis): void {
    this.axis = axis;
    if (this.dims) this.setSlice(Math.floor(sliceCount(axis, this.dims) / 2));
  }

  setSlice(index: number): void {
    if (!this.dims) return;
    const limit = sliceCount(this.axis, this.dims);
    this.sliceIndex = Math.min(Math.max(index, 0), limit - 1);
  }

  /** Apply one rasterized stroke under the active brush. */
  addStroke(voxels: Voxel[]): void {
    for (const voxel of voxels) {
      const key = voxelKey(voxel);
      this.pendingForeground.delete(key);
      this.pendingBackground.delete(key);
      this.pendingErase.delete(key);
      if (this.brush === "foreground") this.pendingForeground.set(key, voxel);
      else if (this.brush === "background") this.pendingBackground.set(key, voxel);
      else this.pendingErase.set(key, voxel);
    }
  }

  get pendingCount(): number {
    return this.pendingForeground.size + this.pendingBackground.size + this.pendingErase.size;
  }

  pendingOnSlice(axis: Axis, index: number): { foreground: Voxel[]; background: Voxel[] } {
    const pick = (m: Map<string, Voxel>) =>
      [...m.values()].filter((v) => (axis === "z" ? v.z : axis === "y" ? v.y : v.x) === index);
    return { foreground: pick(this.pendingForeground), background: pick(this.pendingBackground) };
  }

  /** Drain pending edits for a flush; restore with restorePending on failure. */
  takePending(): PendingEdit {
    const edit: PendingEdit = {
      foreground: [...this.pendingForeground.values()],
      background: [...this.pendingBackground.values()],
      erase: [...this.pendingErase.values()],
    };
    this.pendingForeground.clear();
    this.pendingBackground.clear();
    this.pendingErase.clear();
    return edit;
  }

  restorePending(edit: PendingEdit): void {
    // re-apply under the original classes without clobbering newer strokes
    const reApply = (voxels: Voxel[], target: Map<string, Voxel>) => {
      for (const voxel of voxels) {
        const key = voxelKey(voxel);
        if (
          !this.pendingForeground.has(key) &&
          !this.pendingBackground.has(key) &&
          !this.pendingErase.has(key)
        ) {
          target.set(key, voxel);
        }
      }
    };
    reApply(edit.foreground, this.pendingForeground);
    reApply(edit.background, this.pendingBackground);
    reApply(edit.erase, this.pendingErase);
  }
}
