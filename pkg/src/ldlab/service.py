"""HTTP sampling service: enqueue a layout, poll the job, fetch images.

Jobs run on a small worker pool so the request loop stays responsive while
sampling takes seconds to minutes. One immutable checkpoint is served per
process; every response carries enough provenance (seeds, hashes) to replay
any image bit-exactly through the CLI.
"""

from __future__ import annotations

import base64
import io
import queue
import secrets
import threading
import time
from typing import Literal, Optional

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import Response
from PIL import Image
from pydantic import BaseModel, Field

from .config import ServiceConfig
from .engine import SamplingEngine
from .errors import (
    InvalidCategory,
    InvalidStepCount,
    LayoutInvalid,
    TooManyObjects,
)
from .layout import parse_layout_json


class CanvasModel(BaseModel):
    width: int = Field(gt=0)
    height: int = Field(gt=0)


class ObjectModel(BaseModel):
    category: str | int
    bbox: list[float] = Field(min_length=4, max_length=4)


class LayoutModel(BaseModel):
    canvas: CanvasModel
    objects: list[ObjectModel]


class SampleRequestModel(BaseModel):
    layout: LayoutModel
    guidance_scale: float = Field(default=1.0, ge=0.0)
    n_steps: int = Field(default=0, ge=0)
    n_images: int = Field(default=1, ge=1)
    seed: Optional[int] = None
    sampler: Literal["ancestral", "fast"] = "ancestral"


def _field_error(loc: list, msg: str) -> HTTPException:
    return HTTPException(
        status_code=422,
        detail=[{"loc": ["body"] + loc, "msg": msg, "type": "value_error"}],
    )


class Job:
    def __init__(self, job_id: str, request: SampleRequestModel, seed: int):
        self.id = job_id
        self.request = request
        self.seed = seed
        self.status = "queued"
        self.error: Optional[str] = None
        self.images: list[dict] = []
        self.manifest: Optional[dict] = None
        self.submitted = time.time()
        self.started: Optional[float] = None
        self.finished: Optional[float] = None

    def result(self) -> dict:
        timing = {"submitted": self.submitted}
        if self.started:
            timing["started"] = self.started
        if self.finished:
            timing["finished"] = self.finished
            timing["elapsed_seconds"] = round(self.finished - self.started, 3)
        return {
            "job_id": self.id,
            "status": self.status,
            "error": self.error,
            "images": self.images,
            "manifest": self.manifest,
            "timing": timing,
        }


class JobStore:
    def __init__(self):
        self._jobs: dict[str, Job] = {}
        self._images: dict[str, bytes] = {}
        self._lock = threading.Lock()

    def add(self, job: Job):
        with self._lock:
            self._jobs[job.id] = job

    def get(self, job_id: str) -> Optional[Job]:
        with self._lock:
            return self._jobs.get(job_id)

    def put_image(self, image_id: str, png: bytes):
        with self._lock:
            self._images[image_id] = png

    def get_image(self, image_id: str) -> Optional[bytes]:
        with self._lock:
            return self._images.get(image_id)


def _png_bytes(pixels) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(pixels).save(buf, format="PNG")
    return buf.getvalue()


def create_app(engine: SamplingEngine, service_config: ServiceConfig = ServiceConfig()) -> FastAPI:
    app = FastAPI(title="ldlab sampling service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    store = JobStore()
    work: queue.Queue = queue.Queue(maxsize=service_config.queue_size)

    def run_job(job: Job):
        job.started = time.time()
        job.status = "running"
        try:
            objects, _ = parse_layout_json(
                job.request.layout.model_dump(), engine.vocab
            )
            images, manifest = engine.sample(
                objects,
                guidance_scale=job.request.guidance_scale,
                steps=job.request.n_steps,
                n_images=job.request.n_images,
                seed=job.seed,
                sampler=job.request.sampler,
            )
            for img in images:
                png = _png_bytes(img.pixels)
                image_id = f"{job.id}-{img.index}"
                store.put_image(image_id, png)
                job.images.append(
                    {
                        "id": image_id,
                        "seed": img.seed,
                        "url": f"/api/v1/images/{image_id}",
                        "png_base64": base64.b64encode(png).decode("ascii"),
                    }
                )
            job.manifest = manifest
            job.status = "done"
        except Exception as exc:  # surfaced through the job record
            job.status = "failed"
            job.error = f"{type(exc).__name__}: {exc}"
        finally:
            job.finished = time.time()

    def worker_loop():
        while True:
            job = work.get()
            if job is None:
                return
            run_job(job)
            work.task_done()

    workers = [
        threading.Thread(target=worker_loop, daemon=True, name=f"ldlab-worker-{i}")
        for i in range(service_config.workers)
    ]
    for w in workers:
        w.start()
    app.state.workers = workers
    app.state.work_queue = work
    app.state.store = store

    def validate_request(body: SampleRequestModel):
        n_objects = len(body.layout.objects)
        if n_objects > engine.max_objects:
            raise _field_error(
                ["layout", "objects"],
                f"{n_objects} objects exceed the model capacity of "
                f"{engine.max_objects} (sequence length {engine.config.sequence_length})",
            )
        if body.n_images > service_config.max_images:
            raise _field_error(
                ["n_images"], f"n_images must be <= {service_config.max_images}"
            )
        if body.n_steps and not (1 <= body.n_steps <= engine.schedule.T):
            raise _field_error(
                ["n_steps"], f"n_steps must be in [1, {engine.schedule.T}] (or 0 for full)"
            )
        try:
            engine.resolve_steps(body.n_steps or None, body.sampler)
            objects, _ = parse_layout_json(body.layout.model_dump(), engine.vocab)
            engine.pad(objects)
        except InvalidStepCount as exc:
            raise _field_error(["n_steps"], str(exc))
        except InvalidCategory as exc:
            raise _field_error(["layout", "objects", "category"], str(exc))
        except TooManyObjects as exc:
            raise _field_error(["layout", "objects"], str(exc))
        except LayoutInvalid as exc:
            raise _field_error(["layout"], str(exc))

    @app.post("/api/v1/sample", status_code=202)
    def submit_sample(body: SampleRequestModel):
        validate_request(body)
        seed = body.seed if body.seed is not None else secrets.randbits(48)
        job = Job(secrets.token_hex(8), body, seed)
        store.add(job)
        try:
            work.put_nowait(job)
        except queue.Full:
            raise HTTPException(status_code=429, detail="sampling queue is full")
        return {"job_id": job.id, "status": job.status}

    @app.get("/api/v1/jobs/{job_id}")
    def get_job(job_id: str):
        job = store.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"unknown job {job_id}")
        return job.result()

    @app.get("/api/v1/categories")
    def get_categories():
        return {"categories": list(engine.vocab.names)}

    @app.get("/api/v1/health")
    def get_health():
        return {
            "status": "ok",
            "checkpoint_hash": engine.checkpoint_hash,
            "image_size": engine.config.image_size,
            "sequence_length": engine.config.sequence_length,
            "max_objects": engine.max_objects,
            "num_categories": engine.config.num_categories,
            "timesteps": engine.schedule.T,
            "queue_depth": work.qsize(),
        }

    @app.get("/api/v1/images/{image_id}")
    def get_image(image_id: str):
        png = store.get_image(image_id)
        if png is None:
            raise HTTPException(status_code=404, detail=f"unknown image {image_id}")
        return Response(content=png, media_type="image/png")

    return app
