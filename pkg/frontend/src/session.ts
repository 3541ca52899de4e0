// Session state machine: one in-flight turn, undo via fresh-session replay,
// exportable history. Pure logic over the Api so it is testable headlessly.

import { Api, ApiError, Detection, GuidanceSettings, SessionOverrides } from "./api.js";

export interface TurnCard {
  index: number;
  text: string;
  imagePng: string; // base64
  detections: Detection[];
  timingMs: number;
}

export type Status = "disconnected" | "idle" | "busy" | "replaying";

export interface SessionViewState {
  sessionId: string | null;
  seed: number | null;
  guidance: GuidanceSettings | null;
  canvasPng: string | null;
  cards: TurnCard[];
  status: Status;
  error: string | null;
  showDetections: boolean;
}

export interface SessionExport {
  version: 1;
  sessionId: string;
  seed: number;
  guidance: GuidanceSettings;
  turns: Array<{ text: string; imagePng: string; detections: Detection[]; timingMs: number }>;
}

export class SessionController {
  private readonly api: Api;
  private listeners: Array<(s: SessionViewState) => void> = [];
  state: SessionViewState = {
    sessionId: null,
    seed: null,
    guidance: null,
    canvasPng: null,
    cards: [],
    status: "disconnected",
    error: null,
    showDetections: true,
  };

  constructor(api: Api) {
    this.api = api;
  }

  onChange(fn: (s: SessionViewState) => void): void {
    this.listeners.push(fn);
  }

  private emit(patch: Partial<SessionViewState>): void {
    this.state = { ...this.state, ...patch };
    for (const fn of this.listeners) fn(this.state);
  }

  get busy(): boolean {
    return this.state.status === "busy" || this.state.status === "replaying";
  }

  async startSession(overrides: SessionOverrides = {}): Promise<void> {
    this.emit({ status: "busy", error: null });
    try {
      const res = await this.api.createSession(overrides);
      this.emit({
        sessionId: res.id,
        seed: res.seed,
        guidance: res.guidance,
        canvasPng: res.canvas_png,
        cards: [],
        status: "idle",
        error: null,
      });
    } catch (err) {
      this.fail(err, "disconnected");
    }
  }

  async submitTurn(text: string): Promise<TurnCard | null> {
    if (!this.state.sessionId) {
      this.emit({ error: "no active session" });
      return null;
    }
    if (this.busy) {
      this.emit({ error: "a turn is already in flight" });
      return null;
    }
    this.emit({ status: "busy", error: null });
    try {
      const res = await this.api.submitTurn(this.state.sessionId, text);
      const card: TurnCard = {
        index: res.turn_index,
        text,
        imagePng: res.image_png,
        detections: res.detections,
        timingMs: res.timing_ms,
      };
      this.emit({ cards: [...this.state.cards, card], status: "idle" });
      return card;
    } catch (err) {
      this.fail(err, "idle");
      return null;
    }
  }

  /** Undo by replay: a fresh session with the same seed and guidance re-runs
   * instructions 0..index; later turns are discarded. */
  async undoTo(index: number): Promise<void> {
    if (!this.state.sessionId || this.state.seed === null) {
      this.emit({ error: "no active session" });
      return;
    }
    if (index < 0 || index >= this.state.cards.length) {
      this.emit({ error: `turn ${index} does not exist` });
      return;
    }
    const keep = this.state.cards.slice(0, index + 1);
    const old = this.state.sessionId;
    const overrides: SessionOverrides = {
      seed: this.state.seed,
      phi: this.state.guidance?.phi,
      psi: this.state.guidance?.psi,
      steps: this.state.guidance?.inference_steps,
    };
    this.emit({ status: "replaying", error: null });
    try {
      const fresh = await this.api.createSession(overrides);
      const cards: TurnCard[] = [];
      for (const kept of keep) {
        const res = await this.api.submitTurn(fresh.id, kept.text);
        cards.push({
          index: res.turn_index,
          text: kept.text,
          imagePng: res.image_png,
          detections: res.detections,
          timingMs: res.timing_ms,
        });
      }
      this.emit({
        sessionId: fresh.id,
        canvasPng: fresh.canvas_png,
        cards,
        status: "idle",
      });
      await this.api.deleteSession(old).catch(() => undefined);
    } catch (err) {
      this.fail(err, "idle");
    }
  }

  toggleDetections(): void {
    this.emit({ showDetections: !this.state.showDetections });
  }

  exportSession(): SessionExport | null {
    if (!this.state.sessionId || this.state.seed === null || !this.state.guidance) {
      this.emit({ error: "nothing to export" });
      return null;
    }
    return {
      version: 1,
      sessionId: this.state.sessionId,
      seed: this.state.seed,
      guidance: this.state.guidance,
      turns: this.state.cards.map((c) => ({
        text: c.text,
        imagePng: c.imagePng,
        detections: c.detections,
        timingMs: c.timingMs,
      })),
    };
  }

  private fail(err: unknown, status: Status): void {
    if (err instanceof ApiError) {
      this.emit({ status, error: err.detail });
    } else {
      this.emit({ status: "disconnected", error: "service unreachable" });
    }
  }
}

/** Re-run an exported session against a live service; returns the replayed
 * images so callers can verify determinism. */
export async function replayExport(api: Api, exported: SessionExport): Promise<string[]> {
  const fresh = await api.createSession({
    seed: exported.seed,
    phi: exported.guidance.phi,
    psi: exported.guidance.psi,
    steps: exported.guidance.inference_steps,
  });
  const images: string[] = [];
  for (const turn of exported.turns) {
    const res = await api.submitTurn(fresh.id, turn.text);
    images.push(res.image_png);
  }
  await api.deleteSession(fresh.id).catch(() => undefined);
  return images;
}
