"""Interactive retrieval loop over a shifted target domain.

Each iteration scores the target pool with the current detector, thresholds
and suppresses near-duplicates, ranks the surviving candidates by the chosen
criterion, and issues a fixed budget of window queries: the top-ranked
candidate outside all previously queried windows anchors each window, the
oracle returns animal positions inside it, and the positions become labels.
Adaptive mode refits the surrogate detector on the accumulated labels at the
end of every iteration; static mode keeps the initial predictions.

The loop is a resumable state machine: `next_query` hands out one pending
window at a time and `submit` consumes the matching oracle response, so a
simulated oracle and an interactive one drive identical state transitions.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .candidates import (
    CandidateSet,
    GroundTruthPoint,
    ImageMeta,
    nms,
    threshold_candidates,
)
from .cropping import WindowRect, propose_window
from .detector import SurrogateDetector, update_surrogate
from .ot import (
    cost_matrix,
    solve_exact,
    solve_sinkhorn,
    standardize_features,
    uniform_marginal,
)
from .ranking import CRITERIA, margin_scores, rank, train_margin_ranker
from .synth import SyntheticDataset, initial_detector

MODES = ("adaptive", "static")
OT_SOLVERS = ("auto", "exact", "sinkhorn")
# above this many cost cells the exact simplex is no longer interactive
EXACT_CELL_LIMIT = 40_000
SINKHORN_EPS_FRACTION = 1e-2
SINKHORN_TOL = 1e-7

METRICS_HEADER = "iteration,queries,cumulative_found,recall,fraction_reviewed"


class LoopError(RuntimeError):
    pass


@dataclass(frozen=True)
class LoopConfig:
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

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.iterations <= 0 or self.queries_per_iteration <= 0:
            raise ValueError("iterations and queries_per_iteration must be positive")
        if self.window_w <= 0 or self.window_h <= 0 or self.crop_stride <= 0:
            raise ValueError("window dimensions and stride must be positive")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be in [0, 1]")
        if self.nms_radius < 0:
            raise ValueError("nms_radius must be >= 0")
        if self.ot_solver not in OT_SOLVERS:
            raise ValueError(f"unknown ot_solver {self.ot_solver!r}")


@dataclass(frozen=True)
class OracleResponse:
    window: WindowRect
    animal_points: tuple[tuple[float, float, str], ...]

    def __post_init__(self):
        for px, py, _aid in self.animal_points:
            if not self.window.contains_point(px, py):
                raise ValueError(f"animal point ({px}, {py}) outside window {self.window}")


@dataclass(frozen=True)
class PendingQuery:
    window_id: str
    image_id: str
    rect: WindowRect
    anchor_candidate_id: str
    iteration: int
    query_index: int
    markers: tuple[tuple[float, float, float], ...]
    prior_rects: tuple[WindowRect, ...]


@dataclass(frozen=True)
class MetricRow:
    iteration: int
    queries: int
    cumulative_found: int
    recall: float
    fraction_reviewed: float


@dataclass(frozen=True)
class RunResult:
    config: LoopConfig
    rows: tuple[MetricRow, ...]
    events: tuple[dict, ...]
    found: tuple[str, ...]
    capacity: int


def grid_capacity(images: Sequence[ImageMeta], window_w: int, window_h: int) -> int:
    """Uniform-grid window capacity: ceil(W/w) * ceil(H/h) summed over images."""
    return sum(
        math.ceil(m.width / window_w) * math.ceil(m.height / window_h) for m in images
    )


def simulated_oracle(
    window: WindowRect, gt: Sequence[GroundTruthPoint]
) -> OracleResponse:
    """Ground-truth lookup: every animal position inside the window."""
    points = tuple(
        (p.px, p.py, p.animal_id) for p in gt if window.contains_point(p.px, p.py)
    )
    return OracleResponse(window=window, animal_points=points)


def solve_plan(src_features: np.ndarray, tgt_features: np.ndarray, solver: str = "auto"):
    """Transport plan between two feature sets under the configured solver."""
    a, b = standardize_features(src_features, tgt_features)
    C = cost_matrix(a, b)
    n_s, n_t = C.shape
    mu_s, mu_t = uniform_marginal(n_s), uniform_marginal(n_t)
    if solver == "exact" or (solver == "auto" and n_s * n_t <= EXACT_CELL_LIMIT):
        return solve_exact(mu_s, mu_t, C)
    eps = SINKHORN_EPS_FRACTION * float(np.median(C.values))
    if eps <= 0.0:
        return solve_exact(mu_s, mu_t, C)
    return solve_sinkhorn(mu_s, mu_t, C, eps=eps, tol=SINKHORN_TOL)


class ActiveLearningRun:
    """One seeded run of the loop; strictly sequential state machine."""

    def __init__(
        self,
        dataset: SyntheticDataset,
        config: LoopConfig,
        detector: Optional[SurrogateDetector] = None,
    ):
        self.dataset = dataset
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.source_detector = detector if detector is not None else initial_detector(dataset)
        self.detector = self.source_detector
        self.images = dataset.target.image_map()
        self.capacity = grid_capacity(dataset.target.images, config.window_w, config.window_h)
        self.total_animals = len(dataset.target.gt)
        self.match_radius = dataset.shift.herd_cluster_radius
        self._gt_by_image: dict[str, list[GroundTruthPoint]] = {}
        for p in dataset.target.gt:
            self._gt_by_image.setdefault(p.image_id, []).append(p)
        self._pool_index = {c.candidate_id: i for i, c in enumerate(dataset.target.pool)}

        # Source side of the transfer pipeline, fixed for the whole run. The
        # whole labeled source pool enters the plan, not just thresholded
        # detections: margins are defined for every source candidate, and the
        # low-margin mass is what absorbs target false positives — a
        # detections-only source side is so positive-heavy that the marginal
        # constraints would force animal-grade mass onto background targets.
        if config.criterion == "transfer_sampling":
            source_pool = dataset.source.pool
            self._source_set = source_pool
            ranker = train_margin_ranker(source_pool)
            self._s_src = margin_scores(ranker, self._source_set)
        else:
            self._source_set = None
            self._s_src = None

        # mutable run state
        self.iteration = 0
        self.query_index = 0
        self.total_queries = 0
        self.windows: dict[str, list[WindowRect]] = {}
        self.labels: dict[str, int] = {}
        self.found: dict[str, None] = {}
        self.rows: list[MetricRow] = []
        self.events: list[dict] = []
        self.status = "ready"
        self.pending: Optional[PendingQuery] = None
        self._iter_order: list[str] = []
        self._iter_ready = False
        self._marker_pool: Optional[CandidateSet] = None
        self._static_rank_cache: Optional[list[str]] = None
        self._predicted = self.detector.predict(dataset.target.pool)

    # -- helpers ------------------------------------------------------------

    def _event(self, kind: str, **details) -> None:
        self.events.append({"event": kind, "iteration": self.iteration + 1, **details})

    def _in_queried_window(self, image_id: str, px: float, py: float) -> bool:
        return any(w.contains_point(px, py) for w in self.windows.get(image_id, ()))

    def _filtered_pool(self) -> CandidateSet:
        return nms(
            threshold_candidates(self._predicted, self.config.threshold),
            self.config.nms_radius,
        )

    def _start_iteration(self) -> None:
        kept = self._filtered_pool()
        criterion = self.config.criterion
        cacheable = self.config.mode == "static" and criterion != "random"
        if cacheable and self._static_rank_cache is not None:
            self._iter_order = list(self._static_rank_cache)
            self._iter_ready = True
            self._marker_pool = kept
            return
        plan = None
        s_src = None
        if criterion == "transfer_sampling":
            if len(kept) and len(self._source_set):
                plan = solve_plan(
                    self._source_set.features,
                    kept.features,
                    self.config.ot_solver,
                )
                s_src = self._s_src
            else:
                criterion = "max_confidence"
                self._event("transfer_unavailable", available=len(kept))
        seed = int(self.rng.integers(2**63)) if criterion == "random" else None
        self._iter_order = rank(criterion, kept, plan=plan, s_src=s_src, seed=seed)
        if cacheable:
            self._static_rank_cache = list(self._iter_order)
        self._iter_ready = True
        self._marker_pool = kept

    def _pick_anchor(self) -> Optional[str]:
        pool = self.dataset.target.pool
        for cid in self._iter_order:
            c = pool.candidates[self._pool_index[cid]]
            if not self._in_queried_window(c.image_id, c.px, c.py):
                return cid
        return None

    def _fallback_anchor(self) -> Optional[str]:
        """Max-confidence over the unthresholded pool when the ranked set is spent."""
        conf = self._predicted.animal_confidence
        ids = self._predicted.ids
        order = sorted(range(len(ids)), key=lambda i: (-conf[i], ids[i]))
        pool = self._predicted.candidates
        for i in order:
            c = pool[i]
            if not self._in_queried_window(c.image_id, c.px, c.py):
                return c.candidate_id
        return None

    # -- the state machine ---------------------------------------------------

    def next_query(self) -> Optional[PendingQuery]:
        """The window awaiting a label, or None once the run has finished."""
        if self.status == "finished":
            return None
        if self.pending is not None:
            return self.pending
        if not self._iter_ready:
            self._start_iteration()

        anchor_id = self._pick_anchor()
        if anchor_id is None:
            anchor_id = self._fallback_anchor()
            if anchor_id is None:
                self._event("pool_exhausted", query_index=self.query_index + 1)
                self._finish_iteration()
                return self.next_query()
            self._event("fallback_to_confidence", query_index=self.query_index + 1)

        c = self.dataset.target.pool.candidates[self._pool_index[anchor_id]]
        meta = self.images[c.image_id]
        prev = tuple(self.windows.get(c.image_id, ()))
        scene = [
            (m.px, m.py)
            for m in self._marker_pool
            if m.image_id == c.image_id
        ]
        rect = propose_window(
            (c.px, c.py),
            scene,
            prev,
            meta.width,
            meta.height,
            size=(self.config.window_w, self.config.window_h),
            stride=self.config.crop_stride,
            lam=self.config.crop_lambda,
        )
        markers = tuple(
            (m.px, m.py, float(m.conf_animal))
            for m in self._marker_pool
            if m.image_id == c.image_id and rect.contains_point(m.px, m.py)
        )
        self.pending = PendingQuery(
            window_id=f"w{self.iteration + 1:03d}q{self.query_index + 1:03d}",
            image_id=c.image_id,
            rect=rect,
            anchor_candidate_id=anchor_id,
            iteration=self.iteration + 1,
            query_index=self.query_index + 1,
            markers=markers,
            prior_rects=prev,
        )
        self.status = "awaiting_label"
        return self.pending

    def submit(self, window_id: str, animal_points: Sequence[tuple[float, float, str]]) -> dict:
        """Consume the oracle response for the pending window."""
        if self.pending is None:
            raise LoopError("no window awaiting a label")
        if window_id != self.pending.window_id:
            raise LoopError(
                f"window {window_id!r} is not pending (expected {self.pending.window_id!r})"
            )
        rect = self.pending.rect
        image_id = self.pending.image_id
        points = []
        for px, py, aid in animal_points:
            if not rect.contains_point(px, py):
                raise ValueError(f"animal point ({px}, {py}) outside window {rect}")
            points.append((float(px), float(py), str(aid)))

        self.windows.setdefault(image_id, []).append(rect)
        r2 = self.match_radius * self.match_radius
        for c in self.dataset.target.pool:
            if c.image_id != image_id or not rect.contains_point(c.px, c.py):
                continue
            positive = any(
                (c.px - px) ** 2 + (c.py - py) ** 2 <= r2 for px, py, _ in points
            )
            # a positive sticks: a later window may cover the candidate but
            # not the animal position that already confirmed it
            if positive:
                self.labels[c.candidate_id] = 1
            elif c.candidate_id not in self.labels:
                self.labels[c.candidate_id] = 0
        for _, _, aid in points:
            if aid:
                self.found.setdefault(aid, None)

        self.pending = None
        self.status = "ready"
        self.query_index += 1
        self.total_queries += 1
        if self.query_index >= self.config.queries_per_iteration:
            self._finish_iteration()
        return {"accepted": True, "cumulative_found": len(self.found)}

    def _finish_iteration(self) -> None:
        recall = len(self.found) / self.total_animals if self.total_animals else 0.0
        self.rows.append(
            MetricRow(
                iteration=self.iteration + 1,
                queries=self.total_queries,
                cumulative_found=len(self.found),
                recall=recall,
                fraction_reviewed=self.total_queries / self.capacity if self.capacity else 0.0,
            )
        )
        self.iteration += 1
        self.query_index = 0
        self._iter_ready = False
        self._iter_order = []
        if self.iteration >= self.config.iterations:
            self.status = "finished"
            return
        self.status = "ready"
        if self.config.mode == "adaptive":
            self._refit()

    def _refit(self) -> None:
        completed = self.iteration  # 1-based index of the iteration just closed
        if not self.labels:
            self.events.append(
                {"event": "update_skipped", "iteration": completed, "reason": "no_labels"}
            )
            return
        pool = self.dataset.target.pool
        idx = [self._pool_index[cid] for cid in self.labels]
        X = pool.features[idx]
        y = np.array([float(self.labels[cid]) for cid in self.labels])
        out = update_surrogate(
            self.detector,
            X,
            y,
            source_anchor=(self.source_detector.weights, self.source_detector.bias),
        )
        if out.skipped:
            self.events.append(
                {"event": "update_skipped", "iteration": completed, "reason": out.reason}
            )
            return
        self.detector = out.detector
        self._predicted = self.detector.predict(pool)
        self.events.append(
            {
                "event": "detector_updated",
                "iteration": completed,
                "labeled": len(self.labels),
                "final_loss": out.final_loss,
                "newton_iterations": out.iterations,
            }
        )

    # -- output ---------------------------------------------------------------

    def result(self) -> RunResult:
        return RunResult(
            config=self.config,
            rows=tuple(self.rows),
            events=tuple(self.events),
            found=tuple(self.found),
            capacity=self.capacity,
        )

    # -- snapshot / resume ------------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "version": 1,
            "config": asdict(self.config),
            "iteration": self.iteration,
            "query_index": self.query_index,
            "total_queries": self.total_queries,
            "status": "ready" if self.status == "awaiting_label" else self.status,
            "windows": {
                k: [[w.r_x, w.r_y, w.r_w, w.r_h] for w in v]
                for k, v in self.windows.items()
            },
            "labels": self.labels,
            "found": list(self.found),
            "rows": [asdict(r) for r in self.rows],
            "events": self.events,
            "detector": {
                "weights": [float(v) for v in self.detector.weights],
                "bias": float(self.detector.bias),
                "border_mass": float(self.detector.border_mass),
            },
            "iter_ready": self._iter_ready,
            "iter_order": list(self._iter_order),
            "rng_state": self.rng.bit_generator.state,
        }

    @classmethod
    def resume(cls, dataset: SyntheticDataset, snap: dict) -> "ActiveLearningRun":
        config = LoopConfig(**snap["config"])
        run = cls(dataset, config)
        run.iteration = snap["iteration"]
        run.query_index = snap["query_index"]
        run.total_queries = snap["total_queries"]
        run.status = snap["status"]
        run.windows = {
            k: [WindowRect(*w) for w in v] for k, v in snap["windows"].items()
        }
        run.labels = {k: int(v) for k, v in snap["labels"].items()}
        run.found = {k: None for k in snap["found"]}
        run.rows = [MetricRow(**r) for r in snap["rows"]]
        run.events = list(snap["events"])
        det = snap["detector"]
        run.detector = SurrogateDetector(
            weights=np.array(det["weights"], dtype=np.float64),
            bias=det["bias"],
            border_mass=det["border_mass"],
        )
        run._predicted = run.detector.predict(dataset.target.pool)
        run._iter_ready = snap["iter_ready"]
        run._iter_order = list(snap["iter_order"])
        if run._iter_ready:
            run._marker_pool = run._filtered_pool()
        run.pending = None
        rng = np.random.default_rng(config.seed)
        rng.bit_generator.state = snap["rng_state"]
        run.rng = rng
        return run


def run_simulation(dataset: SyntheticDataset, config: LoopConfig) -> RunResult:
    """Drive a full run against the ground-truth oracle."""
    run = ActiveLearningRun(dataset, config)
    while True:
        q = run.next_query()
        if q is None:
            break
        resp = simulated_oracle(q.rect, run._gt_by_image.get(q.image_id, ()))
        run.submit(q.window_id, resp.animal_points)
    return run.result()


# ---------------------------------------------------------------------------
# Metric and state persistence
# ---------------------------------------------------------------------------


def metrics_csv_text(rows: Sequence[MetricRow]) -> str:
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(
            f"{r.iteration},{r.queries},{r.cumulative_found},"
            f"{r.recall!r},{r.fraction_reviewed!r}"
        )
    return "\n".join(lines) + "\n"


def save_metrics_csv(rows: Sequence[MetricRow], path: str | Path) -> None:
    Path(path).write_text(metrics_csv_text(rows), encoding="utf-8")


def save_runstate(snapshot: dict, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_runstate(path: str | Path) -> dict:
    with Path(path).open(encoding="utf-8") as fh:
        return json.load(fh)


def save_events_jsonl(events: Sequence[dict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for e in events:
            fh.write(json.dumps(e, sort_keys=True))
            fh.write("\n")
