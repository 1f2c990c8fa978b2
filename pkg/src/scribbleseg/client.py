"""Thin HTTP client for the session service.

Talks to a remote server given a base URL, or drives an in-process app
through an ASGI test transport when no server is running (the CLI's
embedded mode), so batch runs exercise the exact same wire surface.
"""

from __future__ import annotations

import io
import json

import httpx

from . import formats
from .grid import LabelMap, ScribbleSet


class ServiceError(RuntimeError):
    def __init__(self, status_code: int, detail: str):
        super().__init__(f"service returned {status_code}: {detail}")
        self.status_code = status_code
        self.detail = detail


class ServiceClient:
    def __init__(self, base_url: str | None = None, app=None):
        if (base_url is None) == (app is None):
            raise ValueError("provide exactly one of base_url or app")
        if app is not None:
            from starlette.testclient import TestClient

            self._client = TestClient(app, base_url="http://scribbleseg.local")
        else:
            self._client = httpx.Client(base_url=base_url, timeout=600.0)

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "ServiceClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @staticmethod
    def _check(response: httpx.Response) -> httpx.Response:
        if response.status_code >= 400:
            try:
                detail = response.json().get("detail", response.text)
            except (json.JSONDecodeError, ValueError):
                detail = response.text
            raise ServiceError(response.status_code, str(detail))
        return response

    def create_session(
        self,
        volume: bytes,
        labels: bytes,
        probs: bytes,
        *,
        checkpoint: bytes | None = None,
        ground_truth: bytes | None = None,
        config: bytes | None = None,
        seed: int = 0,
    ) -> str:
        files = {
            "volume": ("volume.nrrd", volume, "application/octet-stream"),
            "labels": ("labels.nrrd", labels, "application/octet-stream"),
            "probs": ("probs.nrrd", probs, "application/octet-stream"),
        }
        if checkpoint is not None:
            files["checkpoint"] = ("model.monw", checkpoint, "application/octet-stream")
        if ground_truth is not None:
            files["ground_truth"] = ("gt.nrrd", ground_truth, "application/octet-stream")
        if config is not None:
            files["config"] = ("model.cfg", config, "text/plain")
        resp = self._check(self._client.post("/sessions", files=files, data={"seed": str(seed)}))
        return resp.json()["id"]

    def session_info(self, session_id: str) -> dict:
        return self._check(self._client.get(f"/sessions/{session_id}")).json()

    def post_scribbles(self, session_id: str, scribbles: ScribbleSet) -> dict:
        resp = self._client.post(
            f"/sessions/{session_id}/scribbles",
            content=formats.scribbles_to_bytes(scribbles),
            headers={"content-type": "application/octet-stream"},
        )
        return self._check(resp).json()

    def refine(self, session_id: str, overrides: dict | None = None) -> dict:
        resp = self._client.post(f"/sessions/{session_id}/refine", json=overrides or {})
        return self._check(resp).json()

    def get_result(self, session_id: str) -> LabelMap:
        resp = self._check(self._client.get(f"/sessions/{session_id}/result"))
        return formats.read_labelmap(io.BytesIO(resp.content))

    def get_result_bytes(self, session_id: str) -> bytes:
        return self._check(self._client.get(f"/sessions/{session_id}/result")).content

    def get_checkpoint(self, session_id: str) -> bytes:
        return self._check(self._client.get(f"/sessions/{session_id}/checkpoint")).content

    def get_slice(self, session_id: str, axis: str, index: int, layer: str = "image"):
        resp = self._check(
            self._client.get(
                f"/sessions/{session_id}/slice",
                params={"axis": axis, "index": index, "layer": layer},
            )
        )
        meta = json.loads(resp.headers["X-Slice-Meta"])
        import numpy as np

        dtype = np.dtype("<f4") if meta["dtype"] == "float32" else np.dtype("u1")
        plane = np.frombuffer(resp.content, dtype=dtype).reshape(meta["rows"], meta["cols"])
        return plane, meta

    def delete(self, session_id: str) -> None:
        self._check(self._client.delete(f"/sessions/{session_id}"))


def embedded_client(store=None) -> ServiceClient:
    """Client over an in-process service instance (no network)."""
    from .service import create_app

    return ServiceClient(app=create_app(store))
