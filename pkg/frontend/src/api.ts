// Typed client for the canvasdiff session service.

export interface GuidanceSettings {
  phi: number;
  psi: number;
  inference_steps: number;
}

export interface Detection {
  shape: string;
  color: string;
  row: number;
  col: number;
  score: number;
}

export interface CreateSessionResponse {
  id: string;
  canvas_png: string;
  seed: number;
  guidance: GuidanceSettings;
}

export interface TurnResponse {
  image_png: string;
  detections: Detection[];
  timing_ms: number;
  turn_index: number;
}

export interface HistoryEntry {
  text: string;
  image_png: string;
  detections: Detection[];
  timing_ms: number;
  turn_index: number;
}

export interface SessionInfo {
  id: string;
  seed: number;
  guidance: GuidanceSettings;
  config_fingerprint: string;
  history: HistoryEntry[];
}

export interface SessionOverrides {
  seed?: number;
  phi?: number;
  psi?: number;
  steps?: number;
}

export class ApiError extends Error {
  readonly status: number;
  readonly detail: string;

  constructor(status: number, detail: string) {
    super(`HTTP ${status}: ${detail}`);
    this.status = status;
    this.detail = detail;
  }
}

async function parseError(res: Response): Promise<never> {
  let detail = res.statusText;
  try {
    const body = await res.json();
    if (typeof body.detail === "string") detail = body.detail;
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ApiError(res.status, detail);
}

export class Api {
  readonly baseUrl: string;
  private readonly fetchFn: typeof fetch;

  constructor(baseUrl = "", fetchFn: typeof fetch = fetch) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
    this.fetchFn = fetchFn;
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchFn(`${this.baseUrl}${path}`, {
      headers: { "Content-Type": "application/json" },
      ...init,
    });
    if (!res.ok) await parseError(res);
    if (res.status === 204) return undefined as T;
    return (await res.json()) as T;
  }

  healthz(): Promise<{ status: string; checkpoint_hash: string }> {
    return this.request("/healthz");
  }

  createSession(overrides: SessionOverrides = {}): Promise<CreateSessionResponse> {
    return this.request("/sessions", { method: "POST", body: JSON.stringify(overrides) });
  }

  submitTurn(sessionId: string, text: string): Promise<TurnResponse> {
    return this.request(`/sessions/${sessionId}/turns`, {
      method: "POST",
      body: JSON.stringify({ text }),
    });
  }

  getSession(sessionId: string): Promise<SessionInfo> {
    return this.request(`/sessions/${sessionId}`);
  }

  deleteSession(sessionId: string): Promise<void> {
    return this.request(`/sessions/${sessionId}`, { method: "DELETE" });
  }
}
