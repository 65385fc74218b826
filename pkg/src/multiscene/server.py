"""HTTP annotation service: the human oracle endpoint for adaptation runs.

The adaptation loop runs on a worker thread and blocks inside
``InteractiveOracle.annotate`` while the queue holds unlabeled items;
HTTP clients list the queue, fetch item images as PNG, and submit label
vectors. When the last queued item is labeled the oracle unblocks and
fine-tuning for the iteration starts. The service never touches model
state itself; it only fills the queue the trainer drains.

All endpoints live under /api/v1. A labels POST for an unknown or
already-labeled id is a 409; a malformed body is a 400.
"""

from __future__ import annotations

import io
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .metrics import rows_to_dicts


class LabelSubmission(BaseModel):
    id: int
    labels: list[int]


@dataclass
class QueueItem:
    id: int
    image: np.ndarray
    suggested: list[int]
    labels: list[int] | None = None


@dataclass
class ServiceState:
    """Queue and progress shared between the trainer thread and HTTP handlers."""

    schema: list[dict]                 # [{"name": ..., "classes": [...]}]
    phase: str = "idle"
    iteration: int = 0
    budget_total: int = 0
    budget_used: int = 0
    avg_accuracy: float | None = None
    labeled_total: int = 0
    queue: dict[int, QueueItem] = field(default_factory=dict)
    history: list = field(default_factory=list)
    done: bool = False
    lock: threading.Condition = field(default_factory=threading.Condition)

    @property
    def n_tasks(self) -> int:
        return len(self.schema)

    def pending_ids(self) -> list[int]:
        return [i for i, item in self.queue.items() if item.labels is None]

    def enqueue(self, items: list[QueueItem], iteration: int) -> None:
        with self.lock:
            self.queue = {item.id: item for item in items}
            self.iteration = iteration
            self.phase = "annotating"
            self.lock.notify_all()

    def wait_until_labeled(self) -> dict[int, list[int]]:
        with self.lock:
            self.lock.wait_for(lambda: not self.pending_ids())
            result = {i: item.labels for i, item in self.queue.items()}
            self.labeled_total += len(self.queue)
            self.queue = {}
            self.phase = "training"
            return result

    def submit(self, submission: LabelSubmission) -> None:
        with self.lock:
            item = self.queue.get(submission.id)
            if item is None or item.labels is not None:
                raise HTTPException(status_code=409,
                                    detail=f"id {submission.id} is not awaiting labels")
            if len(submission.labels) != self.n_tasks:
                raise HTTPException(status_code=400,
                                    detail=f"expected {self.n_tasks} labels")
            for m, (value, attr) in enumerate(zip(submission.labels, self.schema)):
                if value != -1 and not 0 <= value < len(attr["classes"]):
                    raise HTTPException(
                        status_code=400,
                        detail=f"label {value} invalid for attribute '{attr['name']}'")
            item.labels = list(submission.labels)
            self.lock.notify_all()


class InteractiveOracle:
    """Adaptation-loop oracle backed by the annotation queue."""

    def __init__(self, state: ServiceState, suggest=None):
        self.state = state
        self.suggest = suggest  # callable(images) -> (n, M) argmax labels

    def annotate(self, ids, images=None, suggestions=None) -> np.ndarray:
        if suggestions is None and self.suggest is not None and images is not None:
            suggestions = self.suggest(images)
        items = []
        for k, ex_id in enumerate(ids):
            suggested = [int(v) for v in suggestions[k]] if suggestions is not None \
                else [-1] * self.state.n_tasks
            items.append(QueueItem(id=int(ex_id), image=images[k], suggested=suggested))
        self.state.enqueue(items, self.state.iteration + 1)
        labels = self.state.wait_until_labeled()
        return np.array([labels[int(i)] for i in ids], dtype=np.int64)


def _image_png(image: np.ndarray) -> bytes:
    from PIL import Image

    arr = np.clip(image, 0.0, 1.0)
    arr = (arr.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def create_app(state: ServiceState, static_dir: str | Path | None = None) -> FastAPI:
    from fastapi.exceptions import RequestValidationError
    from fastapi.responses import JSONResponse

    app = FastAPI(title="multiscene annotation service")

    @app.exception_handler(RequestValidationError)
    async def malformed_body(request, exc):
        # the wire contract promises 400 for malformed bodies
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/api/v1/status")
    def status():
        with state.lock:
            pending = len(state.pending_ids())
            return {
                "phase": state.phase,
                "iteration": state.iteration,
                "labeled": state.labeled_total + (len(state.queue) - pending),
                "pending": pending,
                "budget_remaining": max(state.budget_total - state.budget_used, 0),
                "avg_accuracy": state.avg_accuracy,
                "done": state.done,
            }

    @app.get("/api/v1/queue")
    def queue():
        with state.lock:
            return [
                {
                    "id": item.id,
                    "image_url": f"/api/v1/image/{item.id}",
                    "schema": {"attributes": state.schema},
                    "suggested": item.suggested,
                    "pending": item.labels is None,
                }
                for item in state.queue.values() if item.labels is None
            ]

    @app.get("/api/v1/image/{item_id}")
    def image(item_id: int):
        with state.lock:
            item = state.queue.get(item_id)
            if item is None:
                raise HTTPException(status_code=404, detail=f"id {item_id} not queued")
            png = _image_png(item.image)
        return Response(content=png, media_type="image/png")

    @app.post("/api/v1/labels")
    def labels(submission: LabelSubmission):
        state.submit(submission)
        return {"ok": True, "id": submission.id}

    @app.post("/api/v1/advance")
    def advance():
        with state.lock:
            if state.pending_ids():
                raise HTTPException(status_code=409, detail="queue is not empty")
            state.lock.notify_all()
        return {"ok": True, "iteration": state.iteration}

    @app.get("/api/v1/metrics")
    def metrics_endpoint():
        with state.lock:
            return rows_to_dicts(state.history)

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")
    return app


def start_adaptation_session(foundation, pools, config, seed,
                             schema: list[dict] | None = None):
    """Wire an adaptation run to a fresh ServiceState; returns (state, app, run).

    ``run()`` executes the blocking adaptation loop with the interactive
    oracle and returns its result; call it from a worker thread while the
    app is being served (or while a test client drives the queue).
    """
    from .adaptation import run_adaptation
    from .losses import predict_labels

    state = ServiceState(schema=schema or _schema_from_bundle(foundation),
                         phase="waiting")
    state.budget_total = (sum(config.budgets) if config.budgets is not None
                          else config.iterations *
                          max(1, round(config.budget_fraction * len(pools.unlabeled))))
    oracle = InteractiveOracle(state, suggest=lambda imgs: predict_labels(foundation, imgs))

    def on_iteration(j, history, avg):
        with state.lock:
            state.history = list(history)
            state.avg_accuracy = avg
            state.budget_used = len(pools.labeled)

    def run():
        result = run_adaptation(foundation, pools, oracle, config, seed=seed,
                                on_iteration=on_iteration)
        with state.lock:
            state.phase = "done"
            state.done = True
            state.lock.notify_all()
        return result

    return state, run


def run_adaptation_with_service(foundation, pools, config, seed,
                                static_dir=None, host="127.0.0.1", port=8000,
                                schema: list[dict] | None = None):
    """Serve the annotation API while the adaptation loop runs on a thread.

    Returns once the run completes and the server has shut down.
    """
    import uvicorn

    state, run = start_adaptation_session(foundation, pools, config, seed,
                                          schema=schema)
    app = create_app(state, static_dir=static_dir)
    server = uvicorn.Server(uvicorn.Config(app, host=host, port=port, log_level="warning"))
    holder = {}

    def work():
        try:
            holder["result"] = run()
        except BaseException as exc:  # surfaced to the caller after shutdown
            holder["error"] = exc
        finally:
            server.should_exit = True

    thread = threading.Thread(target=work, name="adaptation", daemon=True)

    orig_startup = server.startup

    async def startup(**kwargs):
        await orig_startup(**kwargs)
        thread.start()

    server.startup = startup
    server.run()
    thread.join()
    if "error" in holder:
        raise holder["error"]
    return holder["result"]


def _schema_from_bundle(bundle) -> list[dict]:
    names = [f"attribute_{m}" for m in range(1, bundle.n_tasks + 1)]
    return [{"name": name, "classes": [f"class_{c}" for c in range(k)]}
            for name, k in zip(names, bundle.class_counts)]
