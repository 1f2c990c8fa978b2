/** DOM bootstrap: session setup form, slice canvas, brushes, refine button. */

import { ApiClient } from "./api.js";
import { AnnotatorController } from "./controller.js";
import { planeShape } from "./raster.js";
import {
  blendPending,
  blendResult,
  blendScribbles,
  blendWeights,
  imageToRgba,
  voxelToPlaneCell,
} from "./render.js";
import { ViewerState } from "./state.js";
import type { Axis, BrushKind, PlanePoint } from "./types.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

const state = new ViewerState();
const api = new ApiClient("");
const controller = new AnnotatorController(state, api);

const canvas = $<HTMLCanvasElement>("slice-canvas");
const ctx = canvas.getContext("2d")!;
const sliceSlider = $<HTMLInputElement>("slice-slider");
const statusLine = $<HTMLElement>("status-line");
const timingsLine = $<HTMLElement>("timings-line");
const refineButton = $<HTMLButtonElement>("refine-button");

const SCALE = 12; // canvas pixels per voxel

function setStatus(text: string, isError = false): void {
  statusLine.textContent = text;
  statusLine.className = isError ? "error" : "";
}

function redraw(): void {
  if (!state.dims) return;
  const image = controller.planes.get("image");
  if (!image) return;
  const { rows, cols } = planeShape(state.axis, state.dims);
  canvas.width = cols * SCALE;
  canvas.height = rows * SCALE;
  const rgba = imageToRgba(image, state.windowLevel, state.windowWidth);
  const result = controller.planes.get("result");
  if (state.overlays.result && result) blendResult(rgba, result);
  const weights = controller.planes.get("weights");
  if (state.overlays.weights && weights) blendWeights(rgba, weights);
  const labels = controller.planes.get("labels");
  if (state.overlays.scribbles && labels) blendScribbles(rgba, labels);
  const pending = state.pendingOnSlice(state.axis, state.sliceIndex);
  const cellOf = (voxels: typeof pending.foreground) =>
    voxels
      .map((v) => voxelToPlaneCell(v, state.axis, state.sliceIndex))
      .filter((c): c is [number, number] => c !== null);
  blendPending(rgba, cols, cellOf(pending.foreground), cellOf(pending.background));

  const off = new OffscreenCanvas(cols, rows);
  const offCtx = off.getContext("2d")!;
  offCtx.putImageData(new ImageData(new Uint8ClampedArray(rgba), cols, rows), 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
}

function canvasPoint(event: PointerEvent): PlanePoint {
  const rect = canvas.getBoundingClientRect();
  return {
    col: ((event.clientX - rect.left) / rect.width) * (canvas.width / SCALE),
    row: ((event.clientY - rect.top) / rect.height) * (canvas.height / SCALE),
  };
}

let activePath: PlanePoint[] | null = null;

canvas.addEventListener("pointerdown", (event) => {
  if (!state.sessionId) return;
  canvas.setPointerCapture(event.pointerId);
  activePath = [canvasPoint(event)];
  controller.paint(activePath);
  redraw();
});

canvas.addEventListener("pointermove", (event) => {
  if (!activePath) return;
  const point = canvasPoint(event);
  controller.paint([activePath[activePath.length - 1], point]);
  activePath.push(point);
  redraw();
});

canvas.addEventListener("pointerup", () => {
  activePath = null;
  setStatus(`${state.pendingCount} unsynced scribble voxels`);
});

async function loadAndRedraw(): Promise<void> {
  try {
    await controller.refreshLayers(true);
  } catch {
    await controller.refreshLayers(false); // result may not exist yet
  }
  redraw();
}

function bindBrush(id: string, kind: BrushKind): void {
  $(id).addEventListener("click", () => {
    state.brush = kind;
    document.querySelectorAll(".brush").forEach((el) => el.classList.remove("active"));
    $(id).classList.add("active");
  });
}

bindBrush("brush-fg", "foreground");
bindBrush("brush-bg", "background");
bindBrush("brush-erase", "erase");

$<HTMLInputElement>("brush-radius").addEventListener("input", (event) => {
  state.brushRadius = Number((event.target as HTMLInputElement).value);
});

for (const axis of ["x", "y", "z"] as Axis[]) {
  $(`axis-${axis}`).addEventListener("click", async () => {
    state.setAxis(axis);
    syncSliceSlider();
    await loadAndRedraw();
  });
}

function syncSliceSlider(): void {
  if (!state.dims) return;
  const limit = { x: state.dims.nx, y: state.dims.ny, z: state.dims.nz }[state.axis];
  sliceSlider.max = String(limit - 1);
  sliceSlider.value = String(state.sliceIndex);
  $("slice-label").textContent = `${state.axis} = ${state.sliceIndex}`;
}

sliceSlider.addEventListener("input", async () => {
  state.setSlice(Number(sliceSlider.value));
  syncSliceSlider();
  await loadAndRedraw();
});

for (const layer of ["result", "scribbles", "weights"] as const) {
  $<HTMLInputElement>(`overlay-${layer}`).addEventListener("change", async (event) => {
    state.overlays[layer] = (event.target as HTMLInputElement).checked;
    await loadAndRedraw();
  });
}

refineButton.addEventListener("click", async () => {
  refineButton.disabled = true;
  setStatus("refining...");
  const response = await controller.refineAndRefresh();
  refineButton.disabled = false;
  if (response) {
    const t = response.timings;
    timingsLine.textContent =
      `round ${response.round}: ${response.changed_voxels} voxels changed | ` +
      `weights ${t.weights.toFixed(2)}s, train ${t.train.toFixed(2)}s, ` +
      `infer ${t.infer.toFixed(2)}s, graphcut ${t.graphcut.toFixed(2)}s` +
      (response.metrics?.dice != null ? ` | dice ${response.metrics.dice.toFixed(4)}` : "");
    setStatus(`round ${response.round} done, ${response.scribble_voxels} scribble voxels total`);
    redraw();
  } else if (state.lastError) {
    setStatus(state.lastError, true);
  }
});

$("connect-button").addEventListener("click", async () => {
  const sessionId = $<HTMLInputElement>("session-id").value.trim();
  if (!sessionId) return;
  try {
    await controller.connect(sessionId);
    syncSliceSlider();
    redraw();
    setStatus(`connected to ${sessionId}`);
  } catch (err) {
    setStatus(String(err), true);
  }
});

$("upload-button").addEventListener("click", async () => {
  const form = new FormData();
  const fields: Array<[string, string]> = [
    ["volume", "file-volume"],
    ["labels", "file-labels"],
    ["probs", "file-probs"],
  ];
  for (const [name, id] of fields) {
    const input = $<HTMLInputElement>(id);
    if (!input.files?.length) {
      setStatus(`select a ${name} file first`, true);
      return;
    }
    form.append(name, input.files[0]);
  }
  const gtInput = $<HTMLInputElement>("file-gt");
  if (gtInput.files?.length) form.append("ground_truth", gtInput.files[0]);
  try {
    const sessionId = await api.createSession(form);
    $<HTMLInputElement>("session-id").value = sessionId;
    await controller.connect(sessionId);
    syncSliceSlider();
    redraw();
    setStatus(`created session ${sessionId}`);
  } catch (err) {
    setStatus(String(err), true);
  }
});

setStatus("upload a study or connect to a session id");
