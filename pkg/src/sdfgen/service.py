"""HTTP generation service: queued jobs over a bounded worker pool.

POST /api/generate enqueues a guidance-weighted generation request and returns
202 with a job id (429 once the queue is full); GET /api/jobs/{id} reports
state, progress, and the finished mesh as OBJ text. Status reads never wait on
compute. Identical request bodies and seeds reproduce identical mesh bytes
across restarts because every stage is seeded and checkpoint-driven.
"""

from __future__ import annotations

import base64
import json
import os
import queue
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

import numpy as np

from . import conditioning as cond
from . import dataset as dst
from . import diffusion as df
from . import geometry as geo
from .metrics import near_surface_fallback
from .vqvae import VqVaeModel

CATALOG_PARTIAL_LIMIT = 16  # preview meshes shipped inline; keep the payload sane


@dataclass
class RunConfig:
    dataset: str
    vqvae: str
    diffusion: str
    port: int = 8642
    queue_capacity: int = 8
    workers: int = 1
    critic: Optional[str] = None

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            cfg = cls(**json.load(f))
        for name in ("dataset",):
            if not os.path.isdir(getattr(cfg, name)):
                raise FileNotFoundError(f"config {name} directory missing: {getattr(cfg, name)}")
        for name in ("vqvae", "diffusion"):
            if not os.path.exists(getattr(cfg, name) + ".ckpt"):
                raise FileNotFoundError(
                    f"config {name} checkpoint missing: {getattr(cfg, name)}.ckpt"
                )
        return cfg


@dataclass
class JobRecord:
    job_id: str
    request: dict
    state: str = "queued"           # queued -> running -> done | failed
    progress: float = 0.0
    error: Optional[str] = None
    mesh: Optional[str] = None
    timings: dict = field(default_factory=dict)

    def view(self) -> dict:
        out = {"state": self.state, "progress": round(self.progress, 4),
               "timings": dict(self.timings)}
        if self.error is not None:
            out["error"] = self.error
        if self.mesh is not None:
            out["mesh"] = self.mesh
        return out


class RequestError(ValueError):
    """Malformed generation request (maps to HTTP 400)."""


def decode_silhouette_b64(data: str) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(base64.b64decode(data), dtype=np.uint8))
    if bits.size < 64 * 64:
        raise RequestError("silhouette bitset must carry 64x64 bits")
    return bits[: 64 * 64].reshape(64, 64).astype(bool)


class GenerationService:
    """Model stack plus job machinery; HTTP wiring lives in serve()."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.ds = dst.load_dataset(config.dataset)
        self.vqvae = VqVaeModel.load(config.vqvae)
        self.denoiser = df.DenoiserModel.load(config.diffusion)
        self.sched = self.denoiser.config.schedule()
        self.jobs: dict[str, JobRecord] = {}
        self._lock = threading.Lock()
        self._queue: queue.Queue = queue.Queue(maxsize=config.queue_capacity)
        self._counter = 0
        self._workers: list[threading.Thread] = []
        self._stop = threading.Event()
        self._catalog = self._build_catalog()

    # ---- catalog ---------------------------------------------------------------

    def _build_catalog(self) -> dict:
        partials = []
        for i, sample in enumerate(self.ds.test[:CATALOG_PARTIAL_LIMIT]):
            mesh = geo.marching_cubes(sample.partial)
            partials.append({
                "id": f"test-{i}",
                "category": sample.category,
                "keywords": sample.keywords,
                "preview": geo.mesh_to_obj(mesh) if not mesh.is_empty else "",
            })
        return {
            "classes": list(self.ds.categories),
            "keywords": list(self.ds.vocab),
            "partial_shapes": partials,
        }

    def catalog(self) -> dict:
        return self._catalog

    def _sample_by_id(self, sample_id: str) -> dst.DatasetSample:
        if not isinstance(sample_id, str) or not sample_id.startswith("test-"):
            raise RequestError(f"unknown sample id {sample_id!r}")
        try:
            idx = int(sample_id.split("-", 1)[1])
            return self.ds.test[idx]
        except (ValueError, IndexError):
            raise RequestError(f"unknown sample id {sample_id!r}")

    # ---- request handling --------------------------------------------------------

    def build_condition_set(self, conditions: list) -> cond.ConditionSet:
        entries = []
        enc = self.denoiser.conditioners
        for item in conditions:
            if not isinstance(item, dict) or "modality" not in item:
                raise RequestError("each condition needs a modality")
            modality = item["modality"]
            payload_json = item.get("payload", {})
            weight = float(item.get("weight", 1.0))
            if modality == "class":
                if "class" in payload_json:
                    name = payload_json["class"]
                    if name not in self.ds.categories:
                        raise RequestError(f"unknown class {name!r}")
                    cid = self.ds.categories.index(name)
                else:
                    cid = int(payload_json.get("class_id", -1))
                    if not (0 <= cid < len(self.ds.categories)):
                        raise RequestError(f"class_id {cid} out of range")
                payload = cond.ClassLabel(cid)
            elif modality == "text":
                words = payload_json.get("keywords")
                if not words or not isinstance(words, list):
                    raise RequestError("text condition needs a keyword list")
                bad = [w for w in words if w not in self.ds.vocab]
                if bad:
                    raise RequestError(f"keywords outside vocabulary: {bad}")
                payload = cond.KeywordText([self.ds.vocab.index(w) for w in words])
            elif modality == "partial":
                sample = self._sample_by_id(payload_json.get("sample_id", ""))
                payload = cond.PartialShape(sample.partial, sample.mask)
            elif modality == "silhouette":
                if "sample_id" in payload_json:
                    image = self._sample_by_id(payload_json["sample_id"]).silhouette
                elif "image_base64" in payload_json:
                    image = decode_silhouette_b64(payload_json["image_base64"])
                else:
                    raise RequestError("silhouette condition needs sample_id or image_base64")
                payload = cond.Silhouette(image)
            else:
                raise RequestError(f"unknown modality {modality!r}")
            entries.append(cond.ConditionEntry(payload, enc.encode_condition(payload), weight))
        try:
            return cond.ConditionSet(entries)
        except ValueError as e:
            raise RequestError(str(e))

    def submit(self, body: dict) -> str:
        if not isinstance(body, dict):
            raise RequestError("request body must be a JSON object")
        seed = body.get("seed", 0)
        if not isinstance(seed, int):
            raise RequestError("seed must be an integer")
        steps = body.get("steps", self.sched.T)
        if not isinstance(steps, int) or not (1 <= steps <= self.sched.T):
            raise RequestError(f"steps must be an integer in [1, {self.sched.T}]")
        conditions = body.get("conditions", [])
        self.build_condition_set(conditions)  # validate before queueing
        with self._lock:
            self._counter += 1
            job = JobRecord(job_id=f"job-{self._counter:06d}", request=body)
            job.timings["queued_at"] = time.time()
        try:
            self._queue.put_nowait(job)
        except queue.Full:
            raise BusyError("generation queue is full, retry later")
        with self._lock:
            self.jobs[job.job_id] = job
        return job.job_id

    def job_view(self, job_id: str) -> Optional[dict]:
        with self._lock:
            job = self.jobs.get(job_id)
            return job.view() if job else None

    # ---- compute ---------------------------------------------------------------

    def _set(self, job: JobRecord, **kw) -> None:
        with self._lock:
            for k, v in kw.items():
                setattr(job, k, v)

    def run_job(self, job: JobRecord) -> None:
        self._set(job, state="running")
        with self._lock:
            job.timings["started_at"] = time.time()
        try:
            body = job.request
            conditions = self.build_condition_set(body.get("conditions", []))
            steps = body.get("steps", self.sched.T)
            seed = body.get("seed", 0)
            sched = self.sched if steps == self.sched.T else df.DiffusionSchedule(
                self.sched.betas[:steps])

            def on_progress(p: float) -> None:
                self._set(job, progress=0.9 * p)

            z = df.sample(self.denoiser, sched, conditions, seed, progress=on_progress)
            grid = self.vqvae.decode(self.vqvae.quantize(z)[0])
            mesh = geo.marching_cubes(grid)
            if mesh.is_empty:
                # Degenerate decode: ship a point-cloud-style OBJ of near-surface voxels.
                pts = near_surface_fallback(grid, 256)
                obj = "".join(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n" for p in pts)
            else:
                obj = geo.mesh_to_obj(mesh)
            with self._lock:
                job.timings["finished_at"] = time.time()
            self._set(job, state="done", progress=1.0, mesh=obj)
        except Exception as e:  # job failure must not kill the worker
            with self._lock:
                job.timings["finished_at"] = time.time()
            self._set(job, state="failed", error=f"{type(e).__name__}: {e}")

    def _worker_loop(self) -> None:
        while not self._stop.is_set():
            try:
                job = self._queue.get(timeout=0.2)
            except queue.Empty:
                continue
            self.run_job(job)
            self._queue.task_done()

    def start_workers(self) -> None:
        for i in range(self.config.workers):
            t = threading.Thread(target=self._worker_loop, name=f"gen-worker-{i}", daemon=True)
            t.start()
            self._workers.append(t)

    def stop(self) -> None:
        self._stop.set()
        for t in self._workers:
            t.join(timeout=2.0)


class BusyError(RuntimeError):
    """Queue at capacity (maps to HTTP 429)."""


def make_handler(service: GenerationService):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _send(self, code: int, payload: dict, extra_headers: dict | None = None) -> None:
            body = json.dumps(payload).encode("utf-8")
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            for k, v in (extra_headers or {}).items():
                self.send_header(k, v)
            self.end_headers()
            self.wfile.write(body)

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.end_headers()

        def do_GET(self):
            if self.path == "/api/health":
                self._send(200, {"status": "ok"})
            elif self.path == "/api/catalog":
                self._send(200, service.catalog())
            elif self.path.startswith("/api/jobs/"):
                view = service.job_view(self.path.rsplit("/", 1)[1])
                if view is None:
                    self._send(404, {"error": "unknown job id"})
                else:
                    self._send(200, view)
            else:
                self._send(404, {"error": f"no such endpoint {self.path}"})

        def do_POST(self):
            if self.path != "/api/generate":
                self._send(404, {"error": f"no such endpoint {self.path}"})
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(length) or b"{}")
            except (ValueError, json.JSONDecodeError):
                self._send(400, {"error": "body must be valid JSON"})
                return
            try:
                job_id = service.submit(body)
            except RequestError as e:
                self._send(400, {"error": str(e)})
            except BusyError as e:
                self._send(429, {"error": str(e), "retry_after_s": 2},
                           {"Retry-After": "2"})
            else:
                self._send(202, {"job_id": job_id})

    return Handler


def serve(config: RunConfig) -> tuple[ThreadingHTTPServer, GenerationService]:
    """Start workers and bind the HTTP server (caller runs serve_forever)."""
    service = GenerationService(config)
    service.start_workers()
    try:
        httpd = ThreadingHTTPServer(("0.0.0.0", config.port), make_handler(service))
    except OSError as e:
        service.stop()
        raise RuntimeError(f"cannot bind port {config.port}: {e}") from e
    return httpd, service
