"""HTTP facade over scenes, detections, saliency, and perturbation reports.

Read-only over an immutable dataset and weight set loaded at startup; the
only mutable state is the saliency memo cache, guarded by a lock. Identical
requests return identical bodies.
"""

from __future__ import annotations

import io
import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import Response
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel

from xattn import kernels
from xattn.detector import Weights, filter_detections, forward, load_weights
from xattn.evalharness import MODES, load_curve
from xattn.saliency import METHODS, RAW_METHODS, compute_saliency
from xattn.scenegen import Scene, load_dataset


class SaliencyRequest(BaseModel):
    scene_id: str
    method: str
    query: int | str | None = None  # index or "all-selected"
    layer: int | None = None
    head: int | None = None
    camera: int | None = None


class AppState:
    def __init__(self, scenes: list[Scene], weights: Weights, reports_dir: Path | None, seed: int):
        self.scenes = sorted(scenes, key=lambda s: s.id)
        self.by_id = {s.id: s for s in self.scenes}
        self.weights = weights
        self.reports_dir = reports_dir
        self.seed = seed
        self.memo: dict = {}
        self.lock = threading.Lock()


def create_app(
    dataset_dir: str | Path,
    weights_dir: str | Path,
    reports_dir: str | Path | None = None,
    seed: int = 0,
    ui_dir: str | Path | None = None,
) -> FastAPI:
    scenes = load_dataset(dataset_dir)
    weights = load_weights(weights_dir)
    state = AppState(scenes, weights, Path(reports_dir) if reports_dir else None, seed)
    app = FastAPI(title="xattn explorer service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    cfg = weights.cfg

    @app.get("/api/config")
    def get_config():
        return {
            "n_c": cfg.n_c,
            "n_l": cfg.n_l,
            "n_h": cfg.n_h,
            "n_q": cfg.n_q,
            "n_classes": cfg.n_classes,
            "image_h": cfg.image_h,
            "image_w": cfg.image_w,
            "threshold": cfg.threshold,
            "methods": list(METHODS),
            "modes": list(MODES),
            "kernel_backend": kernels.BACKEND,
        }

    @app.get("/api/scenes")
    def list_scenes():
        return [
            {
                "id": s.id,
                "n_objects": len(s.objects),
                "classes": [o.class_id for o in s.objects],
            }
            for s in state.scenes
        ]

    def _scene_or_404(scene_id: str) -> Scene:
        scene = state.by_id.get(scene_id)
        if scene is None:
            raise HTTPException(status_code=404, detail=f"unknown scene {scene_id}")
        return scene

    @app.get("/api/scenes/{scene_id}/camera/{camera}.png")
    def camera_png(scene_id: str, camera: int):
        scene = _scene_or_404(scene_id)
        if not 0 <= camera < scene.images.shape[0]:
            raise HTTPException(status_code=404, detail=f"camera {camera} out of range")
        pixels = np.floor(scene.images[camera].astype(np.float64) * 255.0 + 0.5)
        img = Image.fromarray(np.clip(pixels, 0, 255).astype(np.uint8), mode="RGB")
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/api/scenes/{scene_id}/detections")
    def scene_detections(scene_id: str):
        scene = _scene_or_404(scene_id)
        key = ("detections", scene_id)
        with state.lock:
            cached = state.memo.get(key)
        if cached is not None:
            return cached
        dets, _ = forward(state.weights, scene, cfg)
        selected = set(filter_detections(dets, cfg.threshold))
        body = [
            {
                "query": d.query,
                "class_probs": [float(p) for p in d.class_probs],
                "center": [d.center[0], d.center[1]],
                "selected": d.query in selected,
            }
            for d in dets
        ]
        with state.lock:
            state.memo[key] = body
        return body

    @app.post("/api/saliency")
    def saliency(req: SaliencyRequest):
        if req.method not in METHODS:
            raise HTTPException(status_code=422, detail=f"method must be one of {METHODS}")
        if (req.layer is not None or req.head is not None) and req.method not in RAW_METHODS:
            raise HTTPException(
                status_code=422,
                detail=f"layer/head are only valid with raw methods {RAW_METHODS}",
            )
        if req.layer is not None and not 0 <= req.layer < cfg.n_l:
            raise HTTPException(status_code=422, detail=f"layer must lie in [0, {cfg.n_l})")
        if req.head is not None and not 0 <= req.head < cfg.n_h:
            raise HTTPException(status_code=422, detail=f"head must lie in [0, {cfg.n_h})")
        if req.camera is not None and not 0 <= req.camera < cfg.n_c:
            raise HTTPException(status_code=422, detail=f"camera must lie in [0, {cfg.n_c})")
        queries = None
        if isinstance(req.query, int):
            if not 0 <= req.query < cfg.n_q:
                raise HTTPException(status_code=422, detail=f"query must lie in [0, {cfg.n_q})")
            queries = [req.query]
        elif req.query not in (None, "all-selected"):
            raise HTTPException(status_code=422, detail="query must be an index or 'all-selected'")
        scene = _scene_or_404(req.scene_id)
        key = (req.scene_id, req.method, req.query, req.layer, req.head, req.camera)
        with state.lock:
            cached = state.memo.get(key)
        if cached is not None:
            return cached
        smap = compute_saliency(
            state.weights,
            scene,
            req.method,
            queries=queries,
            layer=req.layer,
            head=req.head,
            rng_seed=[state.seed, hash(req.scene_id) % (2**32)],
        )
        cameras = [req.camera] if req.camera is not None else range(smap.per_camera.shape[0])
        per_camera = [smap.per_camera[c].tolist() for c in cameras]
        body = {
            "per_camera": per_camera,
            "cameras": list(cameras),
            "queries_used": smap.queries_used,
            "stats": {
                "min": float(smap.per_camera.min()),
                "max": float(smap.per_camera.max()),
            },
        }
        with state.lock:
            state.memo[key] = body
        return body

    @app.get("/api/perturbation")
    def perturbation(method: str, mode: str):
        if state.reports_dir is None:
            raise HTTPException(status_code=404, detail="no report directory configured")
        curve = load_curve(state.reports_dir, method, mode)
        if curve is None:
            raise HTTPException(status_code=404, detail=f"no sweep for {method}/{mode}")
        return {
            "method": curve.method,
            "mode": curve.mode,
            "fractions": curve.fractions,
            "scores": curve.scores,
            "auc": curve.auc,
        }

    @app.get("/api/perturbation/summary")
    def perturbation_summary():
        if state.reports_dir is None:
            raise HTTPException(status_code=404, detail="no report directory configured")
        path = state.reports_dir / "summary.json"
        if not path.exists():
            raise HTTPException(status_code=404, detail="summary.json not found")
        return Response(content=path.read_bytes(), media_type="application/json")

    if ui_dir is not None and Path(ui_dir).exists():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


def run_server(app: FastAPI, addr: str) -> None:
    import uvicorn

    host, _, port = addr.rpartition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port))


__all__ = ["SaliencyRequest", "create_app", "run_server"]
