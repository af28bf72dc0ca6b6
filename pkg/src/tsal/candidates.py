"""Candidate data model: ingestion, dataset splitting, thresholding and grid NMS.

Candidates are detector predictions on a regular grid; each carries a 3-class
confidence vector (background, animal, border), a feature vector and a latent
ground-truth tag that only the oracle and the metrics layer may read.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TRUE_POSITIVE = "true_positive"
FALSE_POSITIVE = "false_positive"
GT_LABELS = (TRUE_POSITIVE, FALSE_POSITIVE)
DOMAIN_TAGS = ("source", "target")

CONFIDENCE_SUM_TOL = 1e-6


class CandidateCsvError(ValueError):
    """Raised for malformed candidate/ground-truth/image CSV rows."""


@dataclass(frozen=True)
class ImageMeta:
    image_id: str
    width: int
    height: int
    domain_tag: str
    animal_count: int = 0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image {self.image_id}: non-positive dimensions")
        if self.domain_tag not in DOMAIN_TAGS:
            raise ValueError(f"image {self.image_id}: bad domain_tag {self.domain_tag!r}")
        if self.animal_count < 0:
            raise ValueError(f"image {self.image_id}: negative animal_count")


@dataclass(frozen=True)
class Candidate:
    candidate_id: str
    image_id: str
    grid_x: int
    grid_y: int
    px: float
    py: float
    confidence: tuple[float, float, float]  # (background, animal, border)
    features: np.ndarray
    gt_label: str

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        self.features.setflags(write=False)

    @property
    def conf_background(self) -> float:
        return self.confidence[0]

    @property
    def conf_animal(self) -> float:
        return self.confidence[1]

    @property
    def conf_border(self) -> float:
        return self.confidence[2]


@dataclass(frozen=True)
class GroundTruthPoint:
    animal_id: str
    image_id: str
    px: float
    py: float


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        all_ids = list(self.train) + list(self.validation) + list(self.test)
        if len(all_ids) != len(set(all_ids)):
            raise ValueError("split parts overlap")


@dataclass(frozen=True)
class CandidateSet:
    """Immutable, ordered collection of candidates from one domain."""

    domain_tag: str
    candidates: tuple[Candidate, ...]
    d: int
    grid_stride: int

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if self.domain_tag not in DOMAIN_TAGS:
            raise ValueError(f"bad domain_tag {self.domain_tag!r}")
        if self.grid_stride <= 0:
            raise ValueError("grid_stride must be positive")
        for c in self.candidates:
            if c.features.shape != (self.d,):
                raise ValueError(
                    f"candidate {c.candidate_id}: feature dimension "
                    f"{c.features.shape} != ({self.d},)"
                )

    def __len__(self) -> int:
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    @cached_property
    def features(self) -> np.ndarray:
        """n x d feature matrix in candidate order."""
        if not self.candidates:
            return np.zeros((0, self.d))
        out = np.stack([c.features for c in self.candidates])
        out.setflags(write=False)
        return out

    @cached_property
    def confidences(self) -> np.ndarray:
        """n x 3 confidence matrix (background, animal, border)."""
        out = np.array([c.confidence for c in self.candidates], dtype=np.float64)
        out = out.reshape(len(self.candidates), 3)
        out.setflags(write=False)
        return out

    @cached_property
    def animal_confidence(self) -> np.ndarray:
        out = self.confidences[:, 1] if self.candidates else np.zeros(0)
        out.setflags(write=False)
        return out

    @cached_property
    def ids(self) -> tuple[str, ...]:
        return tuple(c.candidate_id for c in self.candidates)

    @cached_property
    def gt_labels(self) -> tuple[str, ...]:
        return tuple(c.gt_label for c in self.candidates)

    def subset(self, indices: Iterable[int]) -> "CandidateSet":
        cands = tuple(self.candidates[i] for i in indices)
        return replace(self, candidates=cands)

    def with_confidences(self, conf: np.ndarray) -> "CandidateSet":
        """New set with the same candidates re-scored by a detector."""
        conf = np.asarray(conf, dtype=np.float64)
        if conf.shape != (len(self.candidates), 3):
            raise ValueError(f"confidence matrix shape {conf.shape} mismatch")
        cands = tuple(
            replace(c, confidence=(float(row[0]), float(row[1]), float(row[2])))
            for c, row in zip(self.candidates, conf)
        )
        return replace(self, candidates=cands)


def _validate_confidence(conf: tuple[float, float, float], where: str) -> None:
    for v in conf:
        if not (0.0 <= v <= 1.0):
            raise CandidateCsvError(f"{where}: confidence entry {v} outside [0, 1]")
    if abs(sum(conf) - 1.0) > CONFIDENCE_SUM_TOL:
        raise CandidateCsvError(f"{where}: confidence vector sums to {sum(conf)!r}, not 1")


# ---------------------------------------------------------------------------
# CSV ingestion / persistence
# ---------------------------------------------------------------------------

CANDIDATE_FIXED_COLUMNS = [
    "candidate_id", "image_id", "grid_x", "grid_y",
    "conf_bg", "conf_animal", "conf_border", "gt_label",
]


def load_candidate_set(
    path: str | Path,
    domain_tag: str = "source",
    grid_stride: int = 16,
) -> CandidateSet:
    """Parse a candidate CSV file.

    The header fixes the feature dimension (columns ``f0..f{d-1}``); every row
    must match it. Raises :class:`CandidateCsvError` naming the offending line.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CandidateCsvError(f"{path}: empty file, header expected") from None
        if header[: len(CANDIDATE_FIXED_COLUMNS)] != CANDIDATE_FIXED_COLUMNS:
            raise CandidateCsvError(f"{path}: unexpected header {header[:8]}")
        feature_cols = header[len(CANDIDATE_FIXED_COLUMNS):]
        d = len(feature_cols)
        if feature_cols != [f"f{i}" for i in range(d)]:
            raise CandidateCsvError(f"{path}: feature columns must be f0..f{d - 1}")

        cands: list[Candidate] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            where = f"{path} line {lineno}"
            if len(row) != len(header):
                raise CandidateCsvError(
                    f"{where}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                conf = (float(row[4]), float(row[5]), float(row[6]))
                gx, gy = int(row[2]), int(row[3])
                feats = np.array([float(v) for v in row[8:]], dtype=np.float64)
            except ValueError as exc:
                raise CandidateCsvError(f"{where}: {exc}") from None
            _validate_confidence(conf, where)
            if row[7] not in GT_LABELS:
                raise CandidateCsvError(f"{where}: bad gt_label {row[7]!r}")
            cands.append(
                Candidate(
                    candidate_id=row[0],
                    image_id=row[1],
                    grid_x=gx,
                    grid_y=gy,
                    px=float(gx * grid_stride),
                    py=float(gy * grid_stride),
                    confidence=conf,
                    features=feats,
                    gt_label=row[7],
                )
            )
    return CandidateSet(domain_tag=domain_tag, candidates=tuple(cands), d=d, grid_stride=grid_stride)


def save_candidate_set(cset: CandidateSet, path: str | Path) -> None:
    """Write a candidate CSV; floats use repr so load∘save is lossless."""
    path = Path(path)
    header = CANDIDATE_FIXED_COLUMNS + [f"f{i}" for i in range(cset.d)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for c in cset:
            writer.writerow(
                [c.candidate_id, c.image_id, c.grid_x, c.grid_y]
                + [repr(v) for v in c.confidence]
                + [c.gt_label]
                + [repr(float(v)) for v in c.features]
            )


def load_ground_truth(path: str | Path) -> tuple[GroundTruthPoint, ...]:
    path = Path(path)
    points: list[GroundTruthPoint] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["animal_id", "image_id", "px", "py"]:
            raise CandidateCsvError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise CandidateCsvError(f"{path} line {lineno}: expected 4 fields")
            try:
                points.append(GroundTruthPoint(row[0], row[1], float(row[2]), float(row[3])))
            except ValueError as exc:
                raise CandidateCsvError(f"{path} line {lineno}: {exc}") from None
    seen = set()
    for p in points:
        if p.animal_id in seen:
            raise CandidateCsvError(f"{path}: duplicate animal_id {p.animal_id}")
        seen.add(p.animal_id)
    return tuple(points)


def save_ground_truth(points: Sequence[GroundTruthPoint], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["animal_id", "image_id", "px", "py"])
        for p in points:
            writer.writerow([p.animal_id, p.image_id, repr(p.px), repr(p.py)])


def load_image_metas(path: str | Path) -> tuple[ImageMeta, ...]:
    path = Path(path)
    metas: list[ImageMeta] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["image_id", "width", "height", "domain_tag"]:
            raise CandidateCsvError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                metas.append(ImageMeta(row[0], int(row[1]), int(row[2]), row[3]))
            except ValueError as exc:
                raise CandidateCsvError(f"{path} line {lineno}: {exc}") from None
    ids = [m.image_id for m in metas]
    if len(ids) != len(set(ids)):
        raise CandidateCsvError(f"{path}: duplicate image_id")
    return tuple(metas)


def save_image_metas(metas: Sequence[ImageMeta], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "width", "height", "domain_tag"])
        for m in metas:
            writer.writerow([m.image_id, m.width, m.height, m.domain_tag])


def attach_animal_counts(
    metas: Sequence[ImageMeta], gt: Sequence[GroundTruthPoint]
) -> tuple[ImageMeta, ...]:
    counts: dict[str, int] = {}
    for p in gt:
        counts[p.image_id] = counts.get(p.image_id, 0) + 1
    return tuple(replace(m, animal_count=counts.get(m.image_id, 0)) for m in metas)


# ---------------------------------------------------------------------------
# Dataset splitting
# ---------------------------------------------------------------------------

def split_dataset(
    images: Sequence[ImageMeta],
    gt: Sequence[GroundTruthPoint],
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> DatasetSplit:
    """Whole-image train/validation/test split.

    Images holding at least one animal are packed greedily (descending animal
    count) so the per-part *animal* totals track the ratios; empty images are
    then apportioned at random by *image* count to the same ratios.
    """
    if not images:
        raise ValueError("images must be nonempty")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")

    counts: dict[str, int] = {m.image_id: 0 for m in images}
    for p in gt:
        if p.image_id not in counts:
            raise ValueError(f"ground truth references unknown image {p.image_id}")
        counts[p.image_id] += 1

    with_animals = sorted(
        (m for m in images if counts[m.image_id] > 0),
        key=lambda m: (-counts[m.image_id], m.image_id),
    )
    empty = sorted((m for m in images if counts[m.image_id] == 0), key=lambda m: m.image_id)

    total_animals = sum(counts.values())
    targets = [r * total_animals for r in ratios]
    assigned = [0.0, 0.0, 0.0]
    parts: tuple[list[str], list[str], list[str]] = ([], [], [])
    for m in with_animals:
        deficits = [targets[b] - assigned[b] for b in range(3)]
        b = max(range(3), key=lambda i: (deficits[i], -i))
        parts[b].append(m.image_id)
        assigned[b] += counts[m.image_id]

    # Empty images: largest-remainder apportionment of a seeded shuffle.
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(empty)))
    quotas = [r * len(empty) for r in ratios]
    alloc = [int(q) for q in quotas]
    rem = len(empty) - sum(alloc)
    frac_order = sorted(range(3), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in range(rem):
        alloc[frac_order[i]] += 1
    pos = 0
    for b in range(3):
        for k in order[pos:pos + alloc[b]]:
            parts[b].append(empty[k].image_id)
        pos += alloc[b]

    return DatasetSplit(train=tuple(parts[0]), validation=tuple(parts[1]), test=tuple(parts[2]))


# ---------------------------------------------------------------------------
# Thresholding and non-maximum suppression
# ---------------------------------------------------------------------------

def threshold_candidates(pool: CandidateSet, tau: float = 0.1) -> CandidateSet:
    """Keep candidates with animal confidence >= tau, order preserved."""
    if not (0.0 <= tau <= 1.0):
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    keep = [i for i, c in enumerate(pool) if c.conf_animal >= tau]
    return pool.subset(keep)


def nms(cset: CandidateSet, radius: int = 2) -> CandidateSet:
    """Greedy grid NMS within each image.

    A candidate is suppressed when a higher-confidence candidate has already
    been retained within L1 grid distance <= radius (the 4-neighborhood
    metric). Ties break toward the lower candidate_id. Output preserves the
    input order of the retained candidates.
    """
    order = sorted(
        range(len(cset)),
        key=lambda i: (-cset.candidates[i].conf_animal, cset.candidates[i].candidate_id),
    )
    retained_cells: dict[str, dict[tuple[int, int], bool]] = {}
    keep_mask = [False] * len(cset)
    for i in order:
        c = cset.candidates[i]
        cells = retained_cells.setdefault(c.image_id, {})
        suppressed = False
        for dx in range(-radius, radius + 1):
            span = radius - abs(dx)
            for dy in range(-span, span + 1):
                if (c.grid_x + dx, c.grid_y + dy) in cells:
                    suppressed = True
                    break
            if suppressed:
                break
        if not suppressed:
            cells[(c.grid_x, c.grid_y)] = True
            keep_mask[i] = True
    return cset.subset([i for i in range(len(cset)) if keep_mask[i]])
