"""Window cropping around an anchor candidate.

A query window minimizes three terms: uncovered candidate fraction of the
image, worst overlap with previously queried windows, and a normalized
squared distance between window center and anchor. The search enumerates a
stride grid over every in-bounds position containing the anchor.

The grid search evaluates all positions with vectorized arithmetic that
performs the same operations in the same order as the scalar objective, so
a stride-1 search agrees bit for bit with brute-force enumeration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_WINDOW = (1000, 1000)
DEFAULT_STRIDE = 25
DEFAULT_LAMBDA = 0.01


@dataclass(frozen=True)
class WindowRect:
    r_x: int
    r_y: int
    r_w: int
    r_h: int

    def __post_init__(self):
        if self.r_w <= 0 or self.r_h <= 0:
            raise ValueError(f"window size must be positive, got {self.r_w}x{self.r_h}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.r_x + self.r_w / 2.0, self.r_y + self.r_h / 2.0)

    @property
    def area(self) -> int:
        return self.r_w * self.r_h

    def contains_point(self, x: float, y: float) -> bool:
        """Inclusive on all four edges."""
        return (
            self.r_x <= x <= self.r_x + self.r_w
            and self.r_y <= y <= self.r_y + self.r_h
        )

    def within(self, image_w: int, image_h: int) -> bool:
        return (
            self.r_x >= 0
            and self.r_y >= 0
            and self.r_x + self.r_w <= image_w
            and self.r_y + self.r_h <= image_h
        )

    def intersection_area(self, other: "WindowRect") -> int:
        ix = min(self.r_x + self.r_w, other.r_x + other.r_w) - max(self.r_x, other.r_x)
        iy = min(self.r_y + self.r_h, other.r_y + other.r_h) - max(self.r_y, other.r_y)
        if ix <= 0 or iy <= 0:
            return 0
        return ix * iy


@dataclass(frozen=True)
class CropObjectiveBreakdown:
    term_candidates: float
    term_overlap: float
    term_center: float
    total: float


def crop_objective(
    r: WindowRect,
    anchor: tuple[float, float],
    cands: Sequence[tuple[float, float]],
    prev: Sequence[WindowRect],
    lam: float = DEFAULT_LAMBDA,
) -> CropObjectiveBreakdown:
    """Objective value of one window position.

    term_candidates = 1 - (candidates inside r) / (all candidates); an image
    without candidates scores the constant 1. term_overlap = max over prev of
    intersection area / window area. term_center = lam * squared center-anchor
    distance / (r_w^2 + r_h^2), keeping the term dimensionless and <= lam/4
    for any position containing the anchor.
    """
    ax, ay = anchor
    if not r.contains_point(ax, ay):
        raise ValueError(f"anchor ({ax}, {ay}) outside window {r}")

    count = 0
    for x, y in cands:
        if r.r_x <= x <= r.r_x + r.r_w and r.r_y <= y <= r.r_y + r.r_h:
            count += 1
    total_cands = len(cands)
    term_candidates = 1.0 - count / total_cands if total_cands else 1.0

    area = r.r_w * r.r_h
    term_overlap = 0.0
    for q in prev:
        ix = min(r.r_x + r.r_w, q.r_x + q.r_w) - max(r.r_x, q.r_x)
        if ix <= 0:
            continue
        iy = min(r.r_y + r.r_h, q.r_y + q.r_h) - max(r.r_y, q.r_y)
        if iy <= 0:
            continue
        ov = ix * iy / area
        if ov > term_overlap:
            term_overlap = ov

    cx = r.r_x + r.r_w / 2.0
    cy = r.r_y + r.r_h / 2.0
    dx = cx - ax
    dy = cy - ay
    term_center = lam * ((dx * dx + dy * dy) / (r.r_w * r.r_w + r.r_h * r.r_h))

    total = term_candidates + term_overlap + term_center
    return CropObjectiveBreakdown(term_candidates, term_overlap, term_center, total)


def _offset_range(a: float, side: int, limit: int) -> tuple[int, int]:
    """Feasible top-left offsets on one axis: in bounds and containing a."""
    lo = max(0, int(math.ceil(a - side)))
    hi = min(limit - side, int(math.floor(a)))
    return lo, hi


def propose_window(
    anchor: tuple[float, float],
    cands: Sequence[tuple[float, float]],
    prev: Sequence[WindowRect],
    image_w: int,
    image_h: int,
    size: tuple[int, int] = DEFAULT_WINDOW,
    stride: int = DEFAULT_STRIDE,
    lam: float = DEFAULT_LAMBDA,
) -> WindowRect:
    """Grid-search argmin of crop_objective; ties take the smallest (r_y, r_x)."""
    r_w, r_h = size
    if r_w > image_w or r_h > image_h:
        raise ValueError(
            f"window {r_w}x{r_h} exceeds image {image_w}x{image_h}"
        )
    if stride <= 0:
        raise ValueError("stride must be positive")
    ax, ay = anchor
    if not (0 <= ax <= image_w and 0 <= ay <= image_h):
        raise ValueError(f"anchor ({ax}, {ay}) outside image")

    lo_x, hi_x = _offset_range(ax, r_w, image_w)
    lo_y, hi_y = _offset_range(ay, r_h, image_h)
    xs = np.arange(lo_x, hi_x + 1, stride, dtype=np.int64)
    ys = np.arange(lo_y, hi_y + 1, stride, dtype=np.int64)
    YY, XX = np.meshgrid(ys, xs, indexing="ij")
    X = XX.ravel()
    Y = YY.ravel()

    if cands:
        px = np.array([c[0] for c in cands], dtype=np.float64)
        py = np.array([c[1] for c in cands], dtype=np.float64)
        in_x = (px[None, :] >= X[:, None]) & (px[None, :] <= (X + r_w)[:, None])
        in_y = (py[None, :] >= Y[:, None]) & (py[None, :] <= (Y + r_h)[:, None])
        counts = (in_x & in_y).sum(axis=1)
        term_candidates = 1.0 - counts / len(cands)
    else:
        term_candidates = np.ones(X.shape)

    area = r_w * r_h
    term_overlap = np.zeros(X.shape)
    for q in prev:
        ix = np.minimum(X + r_w, q.r_x + q.r_w) - np.maximum(X, q.r_x)
        iy = np.minimum(Y + r_h, q.r_y + q.r_h) - np.maximum(Y, q.r_y)
        ov = (np.maximum(ix, 0) * np.maximum(iy, 0)) / area
        np.maximum(term_overlap, ov, out=term_overlap)

    cx = X + r_w / 2.0
    cy = Y + r_h / 2.0
    dx = cx - ax
    dy = cy - ay
    term_center = lam * ((dx * dx + dy * dy) / (r_w * r_w + r_h * r_h))

    total = term_candidates + term_overlap + term_center
    best = int(np.argmin(total))
    return WindowRect(r_x=int(X[best]), r_y=int(Y[best]), r_w=r_w, r_h=r_h)
