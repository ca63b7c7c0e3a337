"""HTTP facade over sampling and counterfactual generation.

All endpoints are side-effect-free: the checkpoint and cohort are immutable
shared state loaded at startup, every generation is a pure function of the
request (plus its seed), and identical seeded requests return identical
bodies. Image payloads are the package's raw format, base64-encoded; PNG
previews are available behind a query flag.

Endpoints (JSON unless noted):
  GET  /api/model                      model config + training metadata
  GET  /api/cohort                     cohort listing
  GET  /api/cohort/{id}/baseline       baseline blob (?format=png for a preview)
  GET  /api/cohort/{id}/dose           dose-map blob (?format=png)
  POST /api/generate                   one prediction + metrics + diff map
  POST /api/counterfactual/grid        3x3 treatment grid with shared noise
  POST /api/counterfactual/series      temporal series with shared noise
"""

import base64
import dataclasses
import io
import math
import time

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Response
from pydantic import BaseModel, Field

from . import counterfactual, metrics, phantom, rawio
from .evaluate import config_hash
from .model import (ConfigurationError, ModelCheckpoint, build_conditioning,
                    load_checkpoint, model_from_checkpoint)
from .phantom import ChemoArm, TreatmentContext
from .sampling import SampleSpec, euler_sample


class ContextBody(BaseModel):
    days_since_baseline: int = Field(ge=0)
    chemo: ChemoArm = ChemoArm.ADJUVANT_TMZ
    dose_scale: float = Field(default=1.0, gt=0)

    def to_context(self) -> TreatmentContext:
        return TreatmentContext(self.days_since_baseline, self.chemo,
                                self.dose_scale)


class GenerateBody(BaseModel):
    cohort_id: str
    record_id: str
    context: ContextBody
    n_steps: int = Field(default=4, ge=1)
    seed: int | None = None


class GridBody(BaseModel):
    cohort_id: str
    record_id: str
    context: ContextBody           # reference context (diffs taken against it)
    n_steps: int = Field(default=4, ge=1)
    seed: int = 0


class SeriesBody(BaseModel):
    cohort_id: str
    record_id: str
    context: ContextBody           # template; day is swept over `days`
    days: list[int]
    n_steps: int = Field(default=4, ge=1)
    seed: int = 0


def _b64(img: np.ndarray) -> str:
    return base64.b64encode(rawio.encode_image(img)).decode()


def _png(img: np.ndarray) -> bytes:
    from PIL import Image
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    data = np.clip(arr, 0.0, 1.0)
    mode = "L" if data.ndim == 2 else "RGB"
    image = Image.fromarray((data * 255).round().astype(np.uint8), mode=mode)
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return buf.getvalue()


def _finite(x: float):
    return float(x) if math.isfinite(x) else None


def create_app(checkpoint_path=None, cohort_dir=None, *,
               checkpoint: ModelCheckpoint | None = None,
               cohort=None) -> FastAPI:
    """Build the service; pass paths or already-loaded objects."""
    app = FastAPI(title="flowup", version="0.1.0")

    if checkpoint is None and checkpoint_path is not None:
        checkpoint = load_checkpoint(checkpoint_path)
    net = model_from_checkpoint(checkpoint) if checkpoint is not None else None

    cohort_id, records = None, {}
    if cohort is not None:
        cohort_id, recs = cohort
        records = {r.id: r for r in recs}
    elif cohort_dir is not None:
        cohort_id, recs = phantom.load_cohort(cohort_dir)
        records = {r.id: r for r in recs}

    def require_model():
        if net is None:
            raise HTTPException(503, detail={"code": "model_not_loaded",
                                             "message": "no checkpoint loaded"})
        return net

    def require_record(req_cohort_id, record_id):
        if cohort_id is None or req_cohort_id != cohort_id:
            raise HTTPException(404, detail={"code": "unknown_cohort",
                                             "message": f"cohort '{req_cohort_id}' not loaded"})
        rec = records.get(record_id)
        if rec is None:
            raise HTTPException(404, detail={"code": "unknown_record",
                                             "message": f"record '{record_id}' not found"})
        return rec

    @app.get("/api/model")
    def model_info():
        if checkpoint is None:
            raise HTTPException(503, detail={"code": "model_not_loaded",
                                             "message": "no checkpoint loaded"})
        return {
            "config": checkpoint.config.to_dict(),
            "config_hash": config_hash(checkpoint.config),
            "metadata": {k: v for k, v in checkpoint.metadata.items()
                         if k != "loss_history"},
            "conditioning": {"use_dose": checkpoint.config.use_dose,
                             "use_chemo": checkpoint.config.use_chemo},
        }

    @app.get("/api/cohort")
    def cohort_info():
        if cohort_id is None:
            raise HTTPException(404, detail={"code": "no_cohort",
                                             "message": "no cohort loaded"})
        return {
            "cohort_id": cohort_id,
            "records": [{
                "id": r.id,
                "slice_label": r.slice_label.value,
                "followup_days": r.followup_days,
                "size": r.size,
            } for r in records.values()],
        }

    def _image_endpoint(record_id: str, kind: str, fmt: str):
        if cohort_id is None:
            raise HTTPException(404, detail={"code": "no_cohort",
                                             "message": "no cohort loaded"})
        rec = records.get(record_id)
        if rec is None:
            raise HTTPException(404, detail={"code": "unknown_record",
                                             "message": f"record '{record_id}' not found"})
        img = rec.baseline if kind == "baseline" else rec.dose
        if fmt == "png":
            return Response(content=_png(img), media_type="image/png")
        return {"record_id": record_id, "kind": kind, "image_b64": _b64(img)}

    @app.get("/api/cohort/{record_id}/baseline")
    def baseline(record_id: str, format: str = Query(default="raw")):
        return _image_endpoint(record_id, "baseline", format)

    @app.get("/api/cohort/{record_id}/dose")
    def dose(record_id: str, format: str = Query(default="raw")):
        return _image_endpoint(record_id, "dose", format)

    @app.post("/api/generate")
    def generate(body: GenerateBody):
        model = require_model()
        rec = require_record(body.cohort_id, body.record_id)
        ctx = body.context.to_context()
        seed = body.seed if body.seed is not None \
            else int(np.random.default_rng().integers(0, 2 ** 31 - 1))
        bundle = build_conditioning(model.config, rec.baseline, rec.dose, ctx)
        t0 = time.perf_counter()
        pred = euler_sample(model, bundle, SampleSpec(n_steps=body.n_steps, seed=seed))
        elapsed_ms = (time.perf_counter() - t0) * 1000.0
        oracle = phantom.oracle_followup(rec, ctx)
        return {
            "record_id": rec.id,
            "seed": seed,
            "n_steps": body.n_steps,
            "timing_ms": elapsed_ms,
            "image_b64": _b64(pred),
            "diff_vs_baseline_b64": _b64(pred - rec.baseline),
            "metrics": {
                "mse": metrics.mse(pred, oracle),
                "psnr": _finite(metrics.psnr(pred, oracle)),
                "ssim": metrics.ssim(pred, oracle),
            },
        }

    @app.post("/api/counterfactual/grid")
    def grid(body: GridBody):
        model = require_model()
        rec = require_record(body.cohort_id, body.record_id)
        try:
            g = counterfactual.make_grid(model, rec, body.context.to_context(),
                                         seed=body.seed, n_steps=body.n_steps)
        except ConfigurationError as e:
            raise HTTPException(409, detail={"code": "conditioning_missing",
                                             "message": str(e)})
        cells = []
        for i, chemo in enumerate(g.chemo_axis):
            for j, ds in enumerate(g.dose_axis):
                k = i * len(g.dose_axis) + j
                cells.append({
                    "chemo": chemo.value,
                    "dose_scale": ds,
                    "image_b64": _b64(g.images[k]),
                    "diff_b64": _b64(g.diffs[k]),
                })
        return {
            "record_id": g.record_id,
            "seed": g.seed,
            "n_steps": g.n_steps,
            "dose_axis": list(g.dose_axis),
            "chemo_axis": [c.value for c in g.chemo_axis],
            "display_threshold": g.display_threshold,
            "reference_context": dataclasses.asdict(g.ref_ctx) | {
                "chemo": g.ref_ctx.chemo.value},
            "reference_image_b64": _b64(g.reference_image),
            "cells": cells,
        }

    @app.post("/api/counterfactual/series")
    def series(body: SeriesBody):
        model = require_model()
        rec = require_record(body.cohort_id, body.record_id)
        try:
            s = counterfactual.make_series(model, rec, body.context.to_context(),
                                           body.days, seed=body.seed,
                                           n_steps=body.n_steps)
        except ConfigurationError as e:
            raise HTTPException(409, detail={"code": "conditioning_missing",
                                             "message": str(e)})
        except ValueError as e:
            raise HTTPException(422, detail={"code": "invalid_days",
                                             "message": str(e)})
        return {
            "record_id": s.record_id,
            "seed": s.seed,
            "n_steps": s.n_steps,
            "days": s.days,
            "display_threshold": s.display_threshold,
            "images_b64": [_b64(im) for im in s.images],
            "diffs_b64": [_b64(d) for d in s.diffs],
        }

    return app
