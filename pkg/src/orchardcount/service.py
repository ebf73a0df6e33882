"""Initialization-session HTTP service.

A session fits per-frame color mixtures over a frame budget and lets a client
select components that capture apples, delete saved ones, and finalize the
model file. Every mutation is journaled; replaying the journal reconstructs
the exact model. Fitted mixtures are cached on disk so sessions are
resumable across service restarts.
"""

from __future__ import annotations

import json
import os
import threading
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from pydantic import BaseModel
from . import _fitting
from .imaging import RgbImage, png_bytes, read_image
from .pipeline import list_frames
from .segmentation import (
    AppleColorModel,
    ColorGaussian,
    SegmentationParams,
    classify_superpixels,
    fit_frame_components,
)

_HIGHLIGHT = np.array([255, 0, 200], dtype=np.float64)
_PREVIEW = np.array([40, 255, 60], dtype=np.float64)


class CreateSession(BaseModel):
    frames_dir: str
    budget: int = 50
    seed: int = 0


class SelectRequest(BaseModel):
    frame: int
    component: int


class DeleteRequest(BaseModel):
    saved_id: int


class FinalizeRequest(BaseModel):
    path: str | None = None


@dataclass
class SavedComponent:
    saved_id: int
    frame: int
    component: int
    gaussian: ColorGaussian


@dataclass
class Session:
    session_id: str
    root: str
    frames: list[str]
    budget: int
    seed: int
    params: SegmentationParams
    saved: list[SavedComponent] = field(default_factory=list)
    version: int = 0
    next_saved_id: int = 0
    finalized_path: str | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)
    _cache: dict[int, tuple] = field(default_factory=dict)

    @property
    def journal_path(self) -> str:
        return os.path.join(self.root, "journal.jsonl")

    def journal_append(self, entry: dict) -> None:
        entry = {"seq": self.version, **entry}
        with open(self.journal_path, "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def frame_components(self, f: int):
        """Fitted (superpixels, mixture) for frame f, cached on disk."""
        if f in self._cache:
            return self._cache[f]
        if not 0 <= f < len(self.frames):
            raise KeyError(f)
        img = read_image(self.frames[f])
        sps, mixture = fit_frame_components(
            img, self.params, seed=_fitting.derive_seed(self.seed, f)
        )
        self._cache[f] = (img, sps, mixture)
        return self._cache[f]

    def model(self) -> AppleColorModel:
        return AppleColorModel(
            saved=[s.gaussian for s in self.saved],
            provenance={"source": "init-session", "session": self.session_id},
        )


def _load_session(root: str, session_id: str) -> Session:
    with open(os.path.join(root, "session.json")) as fh:
        doc = json.load(fh)
    session = Session(
        session_id=session_id,
        root=root,
        frames=doc["frames"],
        budget=doc["budget"],
        seed=doc["seed"],
        params=SegmentationParams(seed=doc["seed"]),
    )
    journal = session.journal_path
    if os.path.exists(journal):
        with open(journal) as fh:
            lines = [json.loads(ln) for ln in fh if ln.strip()]
        _apply_journal(session, lines)
    return session


def _apply_journal(session: Session, entries: list[dict]) -> None:
    for e in entries:
        op = e["op"]
        if op == "select":
            g = ColorGaussian(
                e["weight"], np.array(e["mean"]), np.array(e["cov"]).reshape(3, 3)
            )
            session.saved.append(
                SavedComponent(e["saved_id"], e["frame"], e["component"], g)
            )
            session.next_saved_id = max(session.next_saved_id, e["saved_id"] + 1)
        elif op == "delete":
            session.saved = [s for s in session.saved if s.saved_id != e["saved_id"]]
        elif op == "finalize":
            session.finalized_path = e["path"]
        session.version = e["seq"] + 1


def replay_journal(journal_text: str, session_id: str = "replay") -> AppleColorModel:
    """Reconstruct the model an init session produced, from its journal alone."""
    entries = [json.loads(ln) for ln in journal_text.splitlines() if ln.strip()]
    for e in entries:
        if e["op"] == "finalize" and "session" in e:
            session_id = e["session"]
    session = Session(
        session_id=session_id,
        root="",
        frames=[],
        budget=0,
        seed=0,
        params=SegmentationParams(),
    )
    _apply_journal(session, entries)
    return session.model()


def _tint(img: RgbImage, mask_bits: np.ndarray, color: np.ndarray) -> bytes:
    out = img.pixels.astype(np.float64).copy()
    out[mask_bits] = 0.55 * out[mask_bits] + 0.45 * color
    return png_bytes(RgbImage(out.astype(np.uint8)))


def create_app(workdir: str) -> FastAPI:
    os.makedirs(os.path.join(workdir, "sessions"), exist_ok=True)
    app = FastAPI(title="orchardcount init service", version="1")
    sessions: dict[str, Session] = {}
    registry_lock = threading.Lock()

    def get_session(sid: str) -> Session:
        with registry_lock:
            if sid in sessions:
                return sessions[sid]
            root = os.path.join(workdir, "sessions", sid)
            if os.path.isdir(root):
                sessions[sid] = _load_session(root, sid)
                return sessions[sid]
        raise HTTPException(status_code=404, detail=f"unknown session {sid}")

    @app.post("/v1/sessions")
    def create_session(req: CreateSession):
        frames = list_frames(req.frames_dir)[: req.budget]
        sid = uuid.uuid4().hex[:12]
        root = os.path.join(workdir, "sessions", sid)
        os.makedirs(root, exist_ok=True)
        with open(os.path.join(root, "session.json"), "w") as fh:
            json.dump({"frames": frames, "budget": req.budget, "seed": req.seed}, fh)
        session = Session(
            session_id=sid,
            root=root,
            frames=frames,
            budget=req.budget,
            seed=req.seed,
            params=SegmentationParams(seed=req.seed),
        )
        with registry_lock:
            sessions[sid] = session
        return {"session_id": sid, "frames": len(frames)}

    @app.get("/v1/sessions/{sid}")
    def session_status(sid: str):
        s = get_session(sid)
        return {
            "session_id": sid,
            "frames": len(s.frames),
            "saved": len(s.saved),
            "version": s.version,
            "finalized_path": s.finalized_path,
        }

    @app.get("/v1/sessions/{sid}/frames")
    def frame_list(sid: str):
        s = get_session(sid)
        return {"frames": list(range(len(s.frames))), "count": len(s.frames)}

    @app.get("/v1/sessions/{sid}/frames/{f}/components")
    def components(sid: str, f: int):
        s = get_session(sid)
        try:
            _, sps, mixture = s.frame_components(f)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no frame {f}")
        return {
            "frame": f,
            "version": s.version,
            "components": [
                {
                    "index": i,
                    "weight": c.weight,
                    "mean_lab": [float(v) for v in c.mean],
                    "overlay_url": f"/v1/sessions/{sid}/frames/{f}/components/{i}/overlay.png",
                }
                for i, c in enumerate(mixture.components)
            ],
        }

    @app.get("/v1/sessions/{sid}/frames/{f}/image.png")
    def frame_image(sid: str, f: int):
        s = get_session(sid)
        try:
            img, _, _ = s.frame_components(f)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no frame {f}")
        return Response(content=png_bytes(img), media_type="image/png")

    @app.get("/v1/sessions/{sid}/frames/{f}/components/{c}/overlay.png")
    def component_overlay(sid: str, f: int, c: int):
        s = get_session(sid)
        try:
            img, sps, mixture = s.frame_components(f)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no frame {f}")
        if not 0 <= c < len(mixture.components):
            raise HTTPException(status_code=404, detail=f"no component {c}")
        comp = mixture.components[c]
        mask = classify_superpixels(sps, [comp], img.width, img.height, s.params.confidence)
        return Response(content=_tint(img, mask.bits, _HIGHLIGHT), media_type="image/png")

    @app.get("/v1/sessions/{sid}/frames/{f}/preview.png")
    def preview(sid: str, f: int, version: int | None = None):
        s = get_session(sid)
        if version is not None and version != s.version:
            raise HTTPException(status_code=409, detail="stale version")
        try:
            img, sps, _ = s.frame_components(f)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no frame {f}")
        matched = [sc.gaussian for sc in s.saved]
        mask = classify_superpixels(sps, matched, img.width, img.height, s.params.confidence)
        return Response(
            content=_tint(img, mask.bits, _PREVIEW),
            media_type="image/png",
            headers={"X-Model-Version": str(s.version)},
        )

    @app.get("/v1/sessions/{sid}/saved")
    def saved_components(sid: str):
        s = get_session(sid)
        return {
            "version": s.version,
            "saved": [
                {
                    "saved_id": sc.saved_id,
                    "frame": sc.frame,
                    "component": sc.component,
                    "mean_lab": [float(v) for v in sc.gaussian.mean],
                    "weight": sc.gaussian.weight,
                }
                for sc in s.saved
            ],
        }

    @app.post("/v1/sessions/{sid}/select")
    def select(sid: str, req: SelectRequest):
        s = get_session(sid)
        with s.lock:
            if s.finalized_path is not None:
                raise HTTPException(status_code=409, detail="session already finalized")
            try:
                _, _, mixture = s.frame_components(req.frame)
            except KeyError:
                raise HTTPException(status_code=404, detail=f"no frame {req.frame}")
            if not 0 <= req.component < len(mixture.components):
                raise HTTPException(status_code=404, detail=f"no component {req.component}")
            g = mixture.components[req.component]
            sc = SavedComponent(s.next_saved_id, req.frame, req.component, g)
            s.next_saved_id += 1
            s.saved.append(sc)
            s.journal_append(
                {
                    "op": "select",
                    "saved_id": sc.saved_id,
                    "frame": req.frame,
                    "component": req.component,
                    "weight": g.weight,
                    "mean": [float(v) for v in g.mean],
                    "cov": [float(v) for v in g.cov.reshape(9)],
                }
            )
            s.version += 1
            return {"saved_id": sc.saved_id, "version": s.version}

    @app.post("/v1/sessions/{sid}/delete")
    def delete(sid: str, req: DeleteRequest):
        s = get_session(sid)
        with s.lock:
            if s.finalized_path is not None:
                raise HTTPException(status_code=409, detail="session already finalized")
            if not any(sc.saved_id == req.saved_id for sc in s.saved):
                raise HTTPException(status_code=404, detail=f"no saved component {req.saved_id}")
            s.saved = [sc for sc in s.saved if sc.saved_id != req.saved_id]
            s.journal_append({"op": "delete", "saved_id": req.saved_id})
            s.version += 1
            return {"version": s.version}

    @app.post("/v1/sessions/{sid}/finalize")
    def finalize(sid: str, req: FinalizeRequest):
        s = get_session(sid)
        with s.lock:
            if not s.saved:
                raise HTTPException(
                    status_code=400, detail="cannot finalize an empty component list"
                )
            path = req.path or os.path.join(s.root, "model.json")
            if s.finalized_path is not None:
                return {"model_path": s.finalized_path, "version": s.version}
            model = s.model()
            model.save(path)
            s.journal_append({"op": "finalize", "path": path, "session": sid})
            s.version += 1
            s.finalized_path = path
            return {"model_path": path, "version": s.version}

    @app.get("/v1/sessions/{sid}/journal")
    def journal(sid: str):
        s = get_session(sid)
        if not os.path.exists(s.journal_path):
            return Response(content="", media_type="application/x-ndjson")
        with open(s.journal_path) as fh:
            return Response(content=fh.read(), media_type="application/x-ndjson")

    return app
