// DOM rendering: turn cards, pixel-art canvases, detection overlays, controls.

import { Detection } from "./api.js";
import { SessionViewState, TurnCard } from "./session.js";

const CELL_LABELS: Record<string, string> = {
  sphere: "●",
  cube: "■",
  cylinder: "▮",
};

export function drawImage(canvas: HTMLCanvasElement, pngBase64: string,
                           detections: Detection[], showDetections: boolean,
                           gridSize = 4): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const img = new Image();
  img.onload = () => {
    ctx.imageSmoothingEnabled = false;
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    ctx.drawImage(img, 0, 0, canvas.width, canvas.height);
    if (showDetections) drawOverlay(ctx, detections, canvas.width, gridSize);
  };
  img.src = `data:image/png;base64,${pngBase64}`;
}

function drawOverlay(ctx: CanvasRenderingContext2D, detections: Detection[],
                     size: number, gridSize: number): void {
  const cell = size / gridSize;
  ctx.strokeStyle = "rgba(255,255,255,0.25)";
  ctx.lineWidth = 1;
  for (let i = 1; i < gridSize; i++) {
    ctx.beginPath();
    ctx.moveTo(i * cell, 0);
    ctx.lineTo(i * cell, size);
    ctx.stroke();
    ctx.beginPath();
    ctx.moveTo(0, i * cell);
    ctx.lineTo(size, i * cell);
    ctx.stroke();
  }
  ctx.font = `${Math.round(cell / 3)}px sans-serif`;
  ctx.textBaseline = "top";
  for (const det of detections) {
    const x = det.col * cell;
    const y = det.row * cell;
    ctx.strokeStyle = "#ffd54a";
    ctx.lineWidth = 2;
    ctx.strokeRect(x + 1, y + 1, cell - 2, cell - 2);
    ctx.fillStyle = "#ffd54a";
    ctx.fillText(`${CELL_LABELS[det.shape] ?? "?"} ${det.color}`, x + 3, y + 3);
  }
}

export interface RenderCallbacks {
  onUndo: (index: number) => void;
}

export function renderCards(container: HTMLElement, state: SessionViewState,
                            callbacks: RenderCallbacks): void {
  container.textContent = "";
  for (const card of state.cards) {
    container.appendChild(renderCard(card, state, callbacks));
  }
  container.scrollTop = container.scrollHeight;
}

function renderCard(card: TurnCard, state: SessionViewState,
                    callbacks: RenderCallbacks): HTMLElement {
  const el = document.createElement("div");
  el.className = "card";
  el.dataset.turnIndex = String(card.index);

  const header = document.createElement("div");
  header.className = "card-header";
  header.textContent = `turn ${card.index + 1} · ${Math.round(card.timingMs)} ms`;

  const undo = document.createElement("button");
  undo.textContent = "rewind here";
  undo.title = "discard later turns by replaying up to this one";
  undo.disabled = state.status !== "idle";
  undo.addEventListener("click", () => callbacks.onUndo(card.index));
  header.appendChild(undo);

  const text = document.createElement("div");
  text.className = "card-text";
  text.textContent = card.text;

  const canvas = document.createElement("canvas");
  canvas.width = 192;
  canvas.height = 192;
  drawImage(canvas, card.imagePng, card.detections, state.showDetections);

  const detections = document.createElement("div");
  detections.className = "card-detections";
  detections.textContent = card.detections.length
    ? card.detections.map((d) => `${d.color} ${d.shape} @ (${d.row},${d.col})`).join(", ")
    : "nothing detected";

  el.append(header, text, canvas, detections);
  return el;
}

export function renderStatus(banner: HTMLElement, input: HTMLInputElement,
                             submit: HTMLButtonElement, state: SessionViewState): void {
  banner.className = `status status-${state.status}`;
  if (state.error) {
    banner.textContent = state.error;
    banner.classList.add("status-error");
  } else if (state.status === "disconnected") {
    banner.textContent = "service unreachable";
  } else if (state.status === "busy") {
    banner.textContent = "generating…";
  } else if (state.status === "replaying") {
    banner.textContent = "replaying…";
  } else if (!state.sessionId) {
    banner.textContent = "no session";
  } else {
    banner.textContent = `session ${state.sessionId.slice(0, 8)} · seed ${state.seed}`;
  }
  const disabled = state.status !== "idle" || !state.sessionId;
  input.disabled = disabled;
  submit.disabled = disabled;
}

export function downloadJson(payload: unknown, filename: string): void {
  const blob = new Blob([JSON.stringify(payload, null, 1)], { type: "application/json" });
  const url = URL.createObjectURL(blob);
  const a = document.createElement("a");
  a.href = url;
  a.download = filename;
  a.click();
  URL.revokeObjectURL(url);
}
