/** Wires viewer state to the service: painting, flushing, refine rounds.
 *
 * Single-flight: refineAndRefresh is a no-op while a round is in flight
 * (mirrors the server's 409 contract), and it always flushes the pending
 * strokes before posting the refine request.
 */

import { ApiClient, ApiError } from "./api.js";
import { strokeToVoxels } from "./raster.js";
import type { RefineOverrides } from "./api.js";
import type { Layer, PlanePoint, RefineResponse, SlicePlane, Voxel } from "./types.js";
import { ViewerState } from "./state.js";

const asTriples = (voxels: Voxel[]): [number, number, number][] =>
  voxels.map((v) => [v.x, v.y, v.z]);

export class AnnotatorController {
  readonly planes = new Map<Layer, SlicePlane>();

  constructor(
    readonly state: ViewerState,
    private readonly api: ApiClient,
  ) {}

  async connect(sessionId: string): Promise<void> {
    const info = await this.api.sessionInfo(sessionId);
    const [nx, ny, nz] = info.dims;
    this.state.connect(sessionId, { nx, ny, nz });
    this.state.scribbleCounts = { ...info.scribbles };
    await this.refreshLayers(info.has_result);
  }

  /** Rasterize a pointer path on the current slice under the active brush. */
  paint(path: PlanePoint[]): Voxel[] {
    if (!this.state.dims) return [];
    const voxels = strokeToVoxels(
      path,
      this.state.brushRadius,
      this.state.axis,
      this.state.sliceIndex,
      this.state.dims,
    );
    this.state.addStroke(voxels);
    return voxels;
  }

  /** Push pending scribble edits to the service; restores them on failure. */
  async flushScribbles(): Promise<void> {
    const state = this.state;
    if (!state.sessionId || state.pendingCount === 0) return;
    const edit = state.takePending();
    try {
      const counts = await this.api.postScribbles(state.sessionId, {
        foreground: asTriples(edit.foreground),
        background: asTriples(edit.background),
        erase: asTriples(edit.erase),
      });
      state.scribbleCounts = counts;
    } catch (err) {
      state.restorePending(edit);
      throw err;
    }
  }

  /** One interaction round: flush, refine, re-fetch the displayed layers. */
  async refineAndRefresh(overrides: RefineOverrides = {}): Promise<RefineResponse | null> {
    const state = this.state;
    if (state.refining || !state.sessionId) return null;
    state.refining = true;
    state.lastError = null;
    try {
      await this.flushScribbles();
      const response = await this.api.refine(state.sessionId, overrides);
      state.lastRefine = response;
      await this.refreshLayers(true);
      state.overlayVersion += 1;
      return response;
    } catch (err) {
      state.lastError = err instanceof ApiError ? err.detail : String(err);
      return null;
    } finally {
      state.refining = false;
    }
  }

  /** Re-fetch the current slice's layers from the service (never local edits). */
  async refreshLayers(includeResult: boolean): Promise<void> {
    const state = this.state;
    if (!state.sessionId) return;
    const layers: Layer[] = ["image", "labels"];
    if (includeResult && state.overlays.result) layers.push("result");
    if (state.overlays.weights) layers.push("weights");
    for (const layer of layers) {
      this.planes.set(layer, await this.api.getSlice(state.sessionId, state.axis, state.sliceIndex, layer));
    }
  }
}
