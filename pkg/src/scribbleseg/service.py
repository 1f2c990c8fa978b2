"""HTTP session service for the annotation UI and the thin-client CLI.

Endpoints (all JSON unless noted):

* ``POST /sessions`` - multipart upload of volume, initial labels and initial
  probabilities (plus optional checkpoint and ground truth), returns the id.
* ``GET /sessions/{id}/slice?axis=&index=&layer=`` - one raw little-endian
  plane (f32 for image/weights, u8 for labels/result) with a JSON metadata
  header ``X-Slice-Meta``.
* ``POST /sessions/{id}/scribbles`` - SCRB body (octet-stream) or JSON voxel
  lists; returns cumulative counts.
* ``POST /sessions/{id}/refine`` - runs one round; 409 while one is running.
* ``GET /sessions/{id}/result`` - current label map as a grid file.
* ``DELETE /sessions/{id}``.
"""

from __future__ import annotations

import io
import json
import os

import numpy as np
from fastapi import FastAPI, File, Form, HTTPException, Request, Response, UploadFile
from pydantic import BaseModel, Field

from . import formats
from .errors import FormatError, NothingToLearnError, TrainingDivergedError, ValidationError
from .grid import ScribbleSet, linear_index
from .model import model_from_bytes, model_to_bytes, parse_config
from .session import Session, SessionBusyError, SessionStore

_LAYERS = ("image", "labels", "result", "weights")
_AXES = {"x": 2, "y": 1, "z": 0}

# Scribble overlay codes in the "labels" layer, on top of binary labels.
OVERLAY_BACKGROUND_SCRIBBLE = 2
OVERLAY_FOREGROUND_SCRIBBLE = 3


class SessionCreated(BaseModel):
    id: str


class ScribbleCounts(BaseModel):
    foreground: int
    background: int


class RefineRequest(BaseModel):
    tau: float | None = None
    epochs: int | None = None
    lam: float | None = Field(default=None, alias="lambda")
    sigma: float | None = None
    zeta: float | None = None
    eta: float | None = None

    model_config = {"populate_by_name": True}


class StageTimings(BaseModel):
    weights: float
    train: float
    infer: float
    graphcut: float


class RoundMetrics(BaseModel):
    dice: float | None = None
    assd: float | None = None


class RefineResponse(BaseModel):
    round: int
    timings: StageTimings
    changed_voxels: int
    scribble_voxels: int
    metrics: RoundMetrics | None = None


class SessionInfo(BaseModel):
    id: str
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    round: int
    status: str
    scribbles: ScribbleCounts
    has_result: bool
    has_ground_truth: bool


def _read_upload(upload: UploadFile, reader, what: str):
    try:
        return reader(io.BytesIO(upload.file.read()))
    except (FormatError, ValidationError) as exc:
        raise HTTPException(status_code=422, detail=f"{what}: {exc}") from exc


def create_app(store: SessionStore | None = None) -> FastAPI:
    if store is None:
        ttl = float(os.environ.get("SCRIBBLESEG_SESSION_TTL", "3600"))
        store = SessionStore(ttl_seconds=ttl)
    app = FastAPI(title="scribbleseg", version="0.1.0")
    app.state.store = store

    def _session(session_id: str) -> Session:
        try:
            return store.get(session_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}") from None

    @app.post("/sessions", response_model=SessionCreated, status_code=201)
    def create_session(
        volume: UploadFile = File(...),
        labels: UploadFile = File(...),
        probs: UploadFile = File(...),
        checkpoint: UploadFile | None = File(default=None),
        ground_truth: UploadFile | None = File(default=None),
        config: UploadFile | None = File(default=None),
        seed: int = Form(default=0),
    ):
        vol = _read_upload(volume, formats.read_volume, "volume")
        lab = _read_upload(labels, formats.read_labelmap, "labels")
        prb = _read_upload(probs, formats.read_probmap, "probs")
        gt = _read_upload(ground_truth, formats.read_labelmap, "ground_truth") if ground_truth else None
        model_config = None
        if config is not None:
            try:
                model_config = parse_config(config.file.read().decode("ascii", errors="replace"))
            except ValidationError as exc:
                raise HTTPException(status_code=422, detail=f"config: {exc}") from exc
        model = None
        if checkpoint is not None:
            try:
                model = model_from_bytes(checkpoint.file.read())
            except (FormatError, ValidationError) as exc:
                raise HTTPException(status_code=422, detail=f"checkpoint: {exc}") from exc
        try:
            session = Session(vol, lab, prb, model=model, config=model_config, seed=seed, ground_truth=gt)
        except ValidationError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        store.add(session)
        return SessionCreated(id=session.id)

    @app.get("/sessions/{session_id}", response_model=SessionInfo)
    def session_info(session_id: str):
        sess = _session(session_id)
        return SessionInfo(
            id=sess.id,
            dims=sess.volume.dims,
            spacing=sess.volume.spacing,
            round=sess.round,
            status=sess.status,
            scribbles=ScribbleCounts(
                foreground=len(sess.scribbles.foreground),
                background=len(sess.scribbles.background),
            ),
            has_result=sess.result_labels is not None,
            has_ground_truth=sess.ground_truth is not None,
        )

    @app.get("/sessions/{session_id}/slice")
    def get_slice(session_id: str, axis: str, index: int, layer: str = "image"):
        sess = _session(session_id)
        if axis not in _AXES:
            raise HTTPException(status_code=400, detail=f"axis must be one of x, y, z, got {axis!r}")
        if layer not in _LAYERS:
            raise HTTPException(status_code=400, detail=f"layer must be one of {_LAYERS}, got {layer!r}")
        nx, ny, nz = sess.volume.dims
        limit = {"x": nx, "y": ny, "z": nz}[axis]
        if not 0 <= index < limit:
            raise HTTPException(status_code=400, detail=f"slice index {index} out of range [0, {limit})")

        if layer == "image":
            grid = sess.volume.grid
            dtype = "<f4"
        elif layer == "weights":
            grid = sess.weight_map().grid
            dtype = "<f4"
        elif layer == "result":
            if sess.result_labels is None:
                raise HTTPException(status_code=404, detail="no refinement result yet")
            grid = sess.result_labels.grid
            dtype = "u1"
        else:  # labels: initial labels with the scribble overlay on top
            overlay = sess.initial_labels.labels.copy()
            bg = np.fromiter(sess.scribbles.background, dtype=np.int64) if sess.scribbles.background else None
            fg = np.fromiter(sess.scribbles.foreground, dtype=np.int64) if sess.scribbles.foreground else None
            if bg is not None:
                overlay[bg] = OVERLAY_BACKGROUND_SCRIBBLE
            if fg is not None:
                overlay[fg] = OVERLAY_FOREGROUND_SCRIBBLE
            grid = overlay.reshape(nz, ny, nx)
            dtype = "u1"

        ax = _AXES[axis]
        plane = np.take(grid, index, axis=ax)
        payload = np.ascontiguousarray(plane, dtype=np.dtype(dtype)).tobytes()
        meta = {
            "axis": axis,
            "index": index,
            "layer": layer,
            "rows": plane.shape[0],
            "cols": plane.shape[1],
            "dtype": "float32" if dtype == "<f4" else "uint8",
        }
        return Response(
            content=payload,
            media_type="application/octet-stream",
            headers={"X-Slice-Meta": json.dumps(meta)},
        )

    @app.post("/sessions/{session_id}/scribbles", response_model=ScribbleCounts)
    async def post_scribbles(session_id: str, request: Request):
        sess = _session(session_id)
        body = await request.body()
        content_type = request.headers.get("content-type", "")
        erased: list[int] = []
        try:
            if content_type.startswith("application/json"):
                additions, erased = _scribbles_from_json(json.loads(body), sess.volume.dims)
            else:
                additions = formats.scribbles_from_bytes(body)
            if additions.dims != sess.volume.dims:
                raise ValidationError(
                    f"scribble dims {additions.dims} do not match session dims {sess.volume.dims}"
                )
        except json.JSONDecodeError as exc:
            raise HTTPException(status_code=400, detail=f"malformed JSON: {exc}") from exc
        except FormatError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        except ValidationError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        fg, bg = sess.apply_scribble_edit(additions, erased)
        return ScribbleCounts(foreground=fg, background=bg)

    @app.post("/sessions/{session_id}/refine", response_model=RefineResponse)
    def refine(session_id: str, request: RefineRequest | None = None):
        sess = _session(session_id)
        overrides = request.model_dump(exclude_none=True, by_alias=False) if request else None
        try:
            report, changed = sess.refine(overrides)
        except SessionBusyError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        except (NothingToLearnError, ValidationError) as exc:
            raise HTTPException(status_code=422, detail=f"samples: {exc}") from exc
        except TrainingDivergedError as exc:
            raise HTTPException(status_code=500, detail=f"train: {exc}") from exc
        metrics = None
        if report.dice is not None or report.assd is not None:
            metrics = RoundMetrics(dice=report.dice, assd=report.assd)
        return RefineResponse(
            round=report.round,
            timings=StageTimings(
                weights=report.t_weights,
                train=report.t_train,
                infer=report.t_infer,
                graphcut=report.t_graphcut,
            ),
            changed_voxels=changed,
            scribble_voxels=report.scribble_voxels,
            metrics=metrics,
        )

    @app.get("/sessions/{session_id}/result")
    def get_result(session_id: str):
        sess = _session(session_id)
        if sess.result_labels is None:
            raise HTTPException(status_code=404, detail="no refinement result yet")
        buf = io.BytesIO()
        formats.write_nrrd(sess.result_labels, buf)
        return Response(content=buf.getvalue(), media_type="application/octet-stream")

    @app.get("/sessions/{session_id}/checkpoint")
    def get_checkpoint(session_id: str):
        sess = _session(session_id)
        return Response(content=model_to_bytes(sess.model), media_type="application/octet-stream")

    @app.delete("/sessions/{session_id}")
    def delete_session(session_id: str):
        try:
            store.delete(session_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}") from None
        return {"deleted": session_id}

    return app


def _scribbles_from_json(payload: dict, dims) -> tuple[ScribbleSet, list[int]]:
    """JSON scribbles: fg/bg/erase voxel lists, or one class plus voxels.

    Voxels are ``[x, y, z]`` triples; erased voxels are returned separately
    and removed from the session's cumulative set before additions apply.
    """
    if not isinstance(payload, dict):
        raise ValidationError("scribble JSON must be an object")
    additions = ScribbleSet(dims)
    erased: list[int] = []

    def indices_of(voxels) -> list[int]:
        out = []
        for voxel in voxels:
            if not isinstance(voxel, (list, tuple)) or len(voxel) != 3:
                raise ValidationError(f"voxel must be [x, y, z], got {voxel!r}")
            try:
                out.append(linear_index(tuple(int(c) for c in voxel), dims))
            except IndexError as exc:
                raise ValidationError(str(exc)) from exc
        return out

    if "voxels" in payload:
        cls = payload.get("class")
        if cls == "foreground":
            for idx in indices_of(payload["voxels"]):
                additions.add_foreground(idx)
        elif cls == "background":
            for idx in indices_of(payload["voxels"]):
                additions.add_background(idx)
        elif cls == "erase":
            erased = indices_of(payload["voxels"])
        else:
            raise ValidationError(f"class must be 'foreground', 'background' or 'erase', got {cls!r}")
    else:
        for idx in indices_of(payload.get("foreground", [])):
            additions.add_foreground(idx)
        for idx in indices_of(payload.get("background", [])):
            additions.add_background(idx)
        erased = indices_of(payload.get("erase", []))
    return additions, erased


app = create_app()
