"""HTTP front end for the annotation loop.

One service instance owns one active run at a time; every state mutation is
serialized through a single lock, so concurrent requests observe the loop as
a strict ready -> awaiting_label -> ready ... -> finished sequence. Window
payloads carry schematic scene data (candidate markers and window geometry)
rather than imagery, because the synthetic datasets have no pixels.

Submitted label points arrive as bare image coordinates. The service resolves
each point to the nearest ground-truth animal inside the queried window (the
same matching radius the simulated oracle uses for candidate labeling), so a
client that clicks exactly on the true positions reproduces the simulated
run's metrics bit for bit.
"""

from __future__ import annotations

import threading
import time
from typing import Optional

from fastapi import FastAPI, HTTPException, Response
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from .alloop import ActiveLearningRun, LoopConfig, metrics_csv_text
from .cropping import WindowRect
from .synth import SyntheticDataset


class RunRequest(BaseModel):
    model_config = {"extra": "forbid"}

    criterion: str = "transfer_sampling"
    mode: str = "adaptive"
    iterations: int = 10
    queries_per_iteration: int = 50
    window_w: int = 1000
    window_h: int = 1000
    threshold: float = 0.1
    nms_radius: int = 2
    crop_stride: int = 25
    crop_lambda: float = 0.01
    ot_solver: str = "auto"
    seed: int = 0


class LabelPoint(BaseModel):
    model_config = {"extra": "forbid"}

    px: float
    py: float


class LabelRequest(BaseModel):
    model_config = {"extra": "forbid"}

    window_id: str
    animal_points: list[LabelPoint] = []


def _rect_payload(rect: WindowRect) -> dict:
    return {"r_x": rect.r_x, "r_y": rect.r_y, "r_w": rect.r_w, "r_h": rect.r_h}


class RunHost:
    """Owns the runs of one service instance; all mutation under one lock."""

    def __init__(self, dataset: SyntheticDataset):
        self.dataset = dataset
        self.lock = threading.Lock()
        self.runs: dict[str, ActiveLearningRun] = {}
        self.meta: dict[str, dict] = {}
        self._counter = 0
        self._gt_by_image: dict[str, list] = {}
        for p in dataset.target.gt:
            self._gt_by_image.setdefault(p.image_id, []).append(p)

    def create(self, config: LoopConfig) -> str:
        with self.lock:
            for run in self.runs.values():
                if run.status != "finished":
                    raise HTTPException(
                        status_code=409, detail="a run is already active"
                    )
            self._counter += 1
            run_id = f"run-{self._counter:04d}"
            self.runs[run_id] = ActiveLearningRun(self.dataset, config)
            self.meta[run_id] = {"created_at": time.time()}
            return run_id

    def get(self, run_id: str) -> ActiveLearningRun:
        run = self.runs.get(run_id)
        if run is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id!r}")
        return run

    def resolve_animal_ids(
        self, run: ActiveLearningRun, image_id: str, rect: WindowRect, points
    ) -> list[tuple[float, float, str]]:
        """Nearest in-window ground-truth animal within the match radius."""
        gt = [
            g
            for g in self._gt_by_image.get(image_id, ())
            if rect.contains_point(g.px, g.py)
        ]
        r2 = run.match_radius * run.match_radius
        out = []
        for p in points:
            best_id = ""
            best_d = None
            for g in gt:
                d = (g.px - p.px) ** 2 + (g.py - p.py) ** 2
                if d <= r2 and (best_d is None or d < best_d):
                    best_id, best_d = g.animal_id, d
            out.append((p.px, p.py, best_id))
        return out


def create_app(dataset: SyntheticDataset) -> FastAPI:
    app = FastAPI(title="tsal annotation service")
    # the browser client is served from its own origin (static files)
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    host = RunHost(dataset)
    app.state.host = host

    @app.post("/runs")
    def create_run(body: RunRequest) -> dict:
        try:
            config = LoopConfig(**body.model_dump())
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        run_id = host.create(config)
        return {"run_id": run_id}

    @app.get("/runs/{run_id}")
    def describe_run(run_id: str) -> dict:
        run = host.get(run_id)
        with host.lock:
            return {
                "run_id": run_id,
                "status": run.status,
                "iterations_completed": run.iteration,
                "query_index": run.query_index,
                "total_queries": run.total_queries,
                "created_at": host.meta[run_id]["created_at"],
                "criterion": run.config.criterion,
                "mode": run.config.mode,
            }

    @app.get("/runs/{run_id}/next")
    def next_window(run_id: str):
        run = host.get(run_id)
        with host.lock:
            pending = run.next_query()
            if pending is None:
                return Response(status_code=204)
            return {
                "window_id": pending.window_id,
                "image_id": pending.image_id,
                "rect": _rect_payload(pending.rect),
                "candidate_markers": [
                    {"px": px, "py": py, "confidence": conf}
                    for px, py, conf in pending.markers
                ],
                "prior_rects": [_rect_payload(r) for r in pending.prior_rects],
                "iteration": pending.iteration,
                "query_index": pending.query_index,
            }

    @app.post("/runs/{run_id}/label")
    def submit_label(run_id: str, body: LabelRequest) -> dict:
        run = host.get(run_id)
        with host.lock:
            pending = run.pending
            if pending is None or pending.window_id != body.window_id:
                raise HTTPException(
                    status_code=409,
                    detail=f"window {body.window_id!r} is not awaiting a label",
                )
            for p in body.animal_points:
                if not pending.rect.contains_point(p.px, p.py):
                    raise HTTPException(
                        status_code=400,
                        detail=f"point ({p.px}, {p.py}) lies outside the window",
                    )
            points = host.resolve_animal_ids(
                run, pending.image_id, pending.rect, body.animal_points
            )
            try:
                out = run.submit(body.window_id, points)
            except ValueError as exc:
                raise HTTPException(status_code=400, detail=str(exc))
            return out

    @app.get("/runs/{run_id}/metrics")
    def metrics(run_id: str) -> dict:
        run = host.get(run_id)
        with host.lock:
            rows = list(run.rows)
            return {
                "status": run.status,
                "cumulative_found": len(run.found),
                "total_animals": run.total_animals,
                "total_queries": run.total_queries,
                "capacity": run.capacity,
                "rows": [
                    {
                        "iteration": r.iteration,
                        "queries": r.queries,
                        "cumulative_found": r.cumulative_found,
                        "recall": r.recall,
                        "fraction_reviewed": r.fraction_reviewed,
                    }
                    for r in rows
                ],
                "csv": metrics_csv_text(rows),
            }

    return app
