import { Api } from "./api.js";
import { downloadJson, renderCards, renderStatus } from "./render.js";
import { SessionController } from "./session.js";

function el<T extends HTMLElement>(id: string): T {
  const found = document.getElementById(id);
  if (!found) throw new Error(`missing element #${id}`);
  return found as T;
}

function numberOrUndefined(value: string): number | undefined {
  const parsed = Number(value);
  return value.trim() === "" || Number.isNaN(parsed) ? undefined : parsed;
}

export function boot(baseUrl = ""): SessionController {
  const api = new Api(baseUrl);
  const controller = new SessionController(api);

  const banner = el<HTMLElement>("status");
  const cards = el<HTMLElement>("cards");
  const input = el<HTMLInputElement>("instruction");
  const submit = el<HTMLButtonElement>("submit");
  const newSession = el<HTMLButtonElement>("new-session");
  const exportBtn = el<HTMLButtonElement>("export");
  const overlayToggle = el<HTMLInputElement>("overlay-toggle");
  const phi = el<HTMLInputElement>("phi");
  const psi = el<HTMLInputElement>("psi");
  const steps = el<HTMLInputElement>("steps");
  const seed = el<HTMLInputElement>("seed");

  controller.onChange((state) => {
    renderStatus(banner, input, submit, state);
    renderCards(cards, state, { onUndo: (index) => void controller.undoTo(index) });
    const controlsLocked = state.status !== "idle" && state.status !== "disconnected";
    for (const field of [phi, psi, steps, seed]) field.disabled = controlsLocked;
    overlayToggle.checked = state.showDetections;
  });

  newSession.addEventListener("click", () => {
    void controller.startSession({
      seed: numberOrUndefined(seed.value),
      phi: numberOrUndefined(phi.value),
      psi: numberOrUndefined(psi.value),
      steps: numberOrUndefined(steps.value),
    });
  });

  const submitCurrent = () => {
    const text = input.value.trim();
    if (!text) return;
    void controller.submitTurn(text).then((card) => {
      if (card) input.value = "";
    });
  };
  submit.addEventListener("click", submitCurrent);
  input.addEventListener("keydown", (ev) => {
    if (ev.key === "Enter") submitCurrent();
  });

  exportBtn.addEventListener("click", () => {
    const payload = controller.exportSession();
    if (payload) downloadJson(payload, `session-${payload.sessionId.slice(0, 8)}.json`);
  });

  overlayToggle.addEventListener("change", () => controller.toggleDetections());

  void api.healthz().then(
    () => controller.startSession({ seed: numberOrUndefined(seed.value) }),
    () => undefined, // stays disconnected; the banner already says so
  );

  return controller;
}

if (typeof document !== "undefined" && document.getElementById("status")) {
  boot();
}
