/** Typed fetch client for the refinement service. */

import type {
  Axis,
  Layer,
  RefineResponse,
  ScribbleCounts,
  ScribblePayload,
  SessionInfo,
  SliceMeta,
  SlicePlane,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: string,
  ) {
    super(`service returned ${status}: ${detail}`);
  }
}

export interface RefineOverrides {
  tau?: number;
  epochs?: number;
  lambda?: number;
  sigma?: number;
  zeta?: number;
  eta?: number;
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

async function errorDetail(resp: Response): Promise<string> {
  try {
    const body = (await resp.json()) as { detail?: unknown };
    if (body && body.detail !== undefined) return String(body.detail);
  } catch {
    /* non-JSON error body */
  }
  return resp.statusText || `HTTP ${resp.status}`;
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async checked(resp: Response): Promise<Response> {
    if (!resp.ok) throw new ApiError(resp.status, await errorDetail(resp));
    return resp;
  }

  async createSession(form: FormData): Promise<string> {
    const resp = await this.checked(await this.fetchFn(`${this.baseUrl}/sessions`, { method: "POST", body: form }));
    const body = (await resp.json()) as { id: string };
    return body.id;
  }

  async sessionInfo(sessionId: string): Promise<SessionInfo> {
    const resp = await this.checked(await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}`));
    return (await resp.json()) as SessionInfo;
  }

  async postScribbles(sessionId: string, payload: ScribblePayload): Promise<ScribbleCounts> {
    const resp = await this.checked(
      await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}/scribbles`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(payload),
      }),
    );
    return (await resp.json()) as ScribbleCounts;
  }

  async refine(sessionId: string, overrides: RefineOverrides = {}): Promise<RefineResponse> {
    const resp = await this.checked(
      await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}/refine`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(overrides),
      }),
    );
    return (await resp.json()) as RefineResponse;
  }

  async getSlice(sessionId: string, axis: Axis, index: number, layer: Layer): Promise<SlicePlane> {
    const params = new URLSearchParams({ axis, index: String(index), layer });
    const resp = await this.checked(
      await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}/slice?${params}`),
    );
    const metaHeader = resp.headers.get("X-Slice-Meta");
    if (!metaHeader) throw new ApiError(resp.status, "missing X-Slice-Meta header");
    const meta = JSON.parse(metaHeader) as SliceMeta;
    const buffer = await resp.arrayBuffer();
    const data = meta.dtype === "float32" ? new Float32Array(buffer) : new Uint8Array(buffer);
    if (data.length !== meta.rows * meta.cols) {
      throw new ApiError(resp.status, `slice payload ${data.length} != ${meta.rows}x${meta.cols}`);
    }
    return { meta, data };
  }

  async deleteSession(sessionId: string): Promise<void> {
    await this.checked(await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}`, { method: "DELETE" }));
  }
}
