"""HTTP inference service for multi-turn sessions.

Each session owns a reference image that starts as the empty canvas and is
replaced by every accepted generation. Turns within a session are strictly
ordered (concurrent submissions get 409); sessions are isolated except for the
read-only model snapshot. With persistence enabled, an append-only journal plus
PNG blobs restore histories byte-exactly after a restart.
"""

from __future__ import annotations

import base64
import json
import os
import shutil
import threading
import time
import uuid
from dataclasses import dataclass, field, replace

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from . import world
from .diffusion import GuidanceConfig
from .encoders import TokenizationError
from .evaluator import detect
from .model import CanvasModel
from .world import Scene


def turn_seed(session_seed: int, turn_index: int) -> int:
    """Stable per-turn seed so replays with the same session seed are exact."""
    return (session_seed * 1_000_003 + turn_index * 7_919 + 12_345) % (2**31)


class CreateSessionRequest(BaseModel):
    phi: float | None = None
    psi: float | None = None
    steps: int | None = None
    seed: int | None = None


class TurnRequest(BaseModel):
    text: str


@dataclass
class TurnRecord:
    text: str
    png: bytes
    detections: list
    timing_ms: float
    seed: int


@dataclass
class SessionState:
    id: str
    seed: int
    guidance: GuidanceConfig
    current_image: np.ndarray
    history: list = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)


def _detections_payload(det) -> list:
    return [
        {"shape": o.shape, "color": o.color, "row": o.row, "col": o.col, "score": round(s, 4)}
        for o, s in zip(det.objects, det.scores)
    ]


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


class SessionManager:
    def __init__(self, model: CanvasModel, persist_dir=None):
        self.model = model
        self.persist_dir = persist_dir
        self.sessions: dict[str, SessionState] = {}
        self.registry_lock = threading.Lock()
        w = model.config.world
        self.canvas = world.render(Scene(w.grid_size), w.resolution)
        if persist_dir:
            os.makedirs(os.path.join(persist_dir, "sessions"), exist_ok=True)
            self._restore()

    # -- persistence -----------------------------------------------------

    def _session_dir(self, sid: str) -> str:
        return os.path.join(self.persist_dir, "sessions", sid)

    def _persist_create(self, s: SessionState) -> None:
        if not self.persist_dir:
            return
        d = self._session_dir(s.id)
        os.makedirs(d, exist_ok=True)
        with open(os.path.join(d, "meta.json"), "w") as f:
            json.dump({"id": s.id, "seed": s.seed,
                       "guidance": {"phi": s.guidance.phi, "psi": s.guidance.psi,
                                    "inference_steps": s.guidance.inference_steps}}, f)

    def _persist_turn(self, s: SessionState, index: int, rec: TurnRecord) -> None:
        if not self.persist_dir:
            return
        d = self._session_dir(s.id)
        png_name = f"turn_{index:03d}.png"
        with open(os.path.join(d, png_name), "wb") as f:
            f.write(rec.png)
        with open(os.path.join(d, "turns.jsonl"), "a") as f:
            f.write(json.dumps({"index": index, "text": rec.text, "png": png_name,
                                "detections": rec.detections, "timing_ms": rec.timing_ms,
                                "seed": rec.seed}) + "\n")

    def _restore(self) -> None:
        root = os.path.join(self.persist_dir, "sessions")
        for sid in sorted(os.listdir(root)):
            d = os.path.join(root, sid)
            meta_path = os.path.join(d, "meta.json")
            if not os.path.exists(meta_path):
                continue
            with open(meta_path) as f:
                meta = json.load(f)
            guidance = replace(self.model.config.guidance, **meta.get("guidance", {}))
            s = SessionState(id=meta["id"], seed=meta["seed"], guidance=guidance,
                             current_image=self.canvas.copy())
            journal = os.path.join(d, "turns.jsonl")
            if os.path.exists(journal):
                with open(journal) as f:
                    for line in f:
                        entry = json.loads(line)
                        with open(os.path.join(d, entry["png"]), "rb") as pf:
                            png = pf.read()
                        s.history.append(TurnRecord(entry["text"], png, entry["detections"],
                                                    entry["timing_ms"], entry["seed"]))
                if s.history:
                    s.current_image = world.from_png_bytes(s.history[-1].png)
            self.sessions[s.id] = s

    # -- operations --------------------------------------------------------

    def create(self, req: CreateSessionRequest) -> SessionState:
        overrides = {}
        if req.phi is not None:
            overrides["phi"] = req.phi
        if req.psi is not None:
            overrides["psi"] = req.psi
        if req.steps is not None:
            overrides["inference_steps"] = req.steps
        guidance = replace(self.model.config.guidance, **overrides)
        seed = req.seed if req.seed is not None else int.from_bytes(os.urandom(4), "big")
        s = SessionState(id=uuid.uuid4().hex, seed=seed, guidance=guidance,
                         current_image=self.canvas.copy())
        with self.registry_lock:
            self.sessions[s.id] = s
        self._persist_create(s)
        return s

    def get(self, sid: str) -> SessionState:
        s = self.sessions.get(sid)
        if s is None:
            raise HTTPException(status_code=404, detail=f"unknown session {sid}")
        return s

    def delete(self, sid: str) -> None:
        with self.registry_lock:
            if sid not in self.sessions:
                raise HTTPException(status_code=404, detail=f"unknown session {sid}")
            del self.sessions[sid]
        if self.persist_dir:
            shutil.rmtree(self._session_dir(sid), ignore_errors=True)

    def run_turn(self, sid: str, text: str) -> dict:
        s = self.get(sid)
        if not s.lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="a turn is already in flight")
        try:
            try:
                self.model.tokenizer.encode(text)
            except TokenizationError as err:
                raise HTTPException(status_code=422, detail=f"unknown token {err.token!r}")
            index = len(s.history)
            seed = turn_seed(s.seed, index)
            start = time.perf_counter()
            img = self.model.generate(s.current_image, text, s.guidance, seed=seed)
            timing_ms = (time.perf_counter() - start) * 1000.0
            det = detect(img, self.model.config.world.grid_size)
            png = world.to_png_bytes(img)
            rec = TurnRecord(text, png, _detections_payload(det), timing_ms, seed)
            s.history.append(rec)
            # keep the 8-bit image as session state so a crash-restart (which
            # restores from PNGs) continues bit-identically
            s.current_image = world.from_png_bytes(png)
            self._persist_turn(s, index, rec)
            return {"image_png": _b64(png), "detections": rec.detections,
                    "timing_ms": timing_ms, "turn_index": index}
        finally:
            s.lock.release()


def create_app(model: CanvasModel | None, persist_dir=None) -> FastAPI:
    app = FastAPI(title="canvasdiff")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    manager = SessionManager(model, persist_dir) if model is not None else None
    app.state.manager = manager
    checkpoint_hash = model.store.fingerprint() if model is not None else None

    def require_manager() -> SessionManager:
        if manager is None:
            raise HTTPException(status_code=503, detail="model not loaded")
        return manager

    @app.get("/healthz")
    def healthz():
        if manager is None:
            raise HTTPException(status_code=503, detail="model not loaded")
        return {"status": "ok", "checkpoint_hash": checkpoint_hash,
                "config_fingerprint": model.config_fingerprint(),
                "sessions": len(manager.sessions)}

    @app.post("/sessions")
    def create_session(req: CreateSessionRequest | None = None):
        m = require_manager()
        s = m.create(req or CreateSessionRequest())
        return {"id": s.id, "canvas_png": _b64(world.to_png_bytes(s.current_image)),
                "seed": s.seed, "guidance": _guidance_payload(s.guidance)}

    @app.post("/sessions/{sid}/turns")
    def submit_turn(sid: str, req: TurnRequest):
        return require_manager().run_turn(sid, req.text)

    @app.get("/sessions/{sid}")
    def get_session(sid: str):
        m = require_manager()
        s = m.get(sid)
        return {
            "id": s.id,
            "seed": s.seed,
            "guidance": _guidance_payload(s.guidance),
            "config_fingerprint": model.config_fingerprint(),
            "history": [
                {"text": r.text, "image_png": _b64(r.png), "detections": r.detections,
                 "timing_ms": r.timing_ms, "turn_index": i}
                for i, r in enumerate(s.history)
            ],
        }

    @app.delete("/sessions/{sid}", status_code=204)
    def delete_session(sid: str):
        require_manager().delete(sid)

    return app


def _guidance_payload(g: GuidanceConfig) -> dict:
    return {"phi": g.phi, "psi": g.psi, "inference_steps": g.inference_steps}


def run_server(checkpoint: str, port: int = 8000, persist_dir=None, host: str = "127.0.0.1"):
    import uvicorn

    from .learning import set_deterministic

    set_deterministic(True)
    model = CanvasModel.load(checkpoint)
    app = create_app(model, persist_dir)
    uvicorn.run(app, host=host, port=port)
