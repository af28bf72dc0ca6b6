"""Candidate priority orderings.

The transfer-sampling path trains a linear margin ranker on labeled source
candidates, pushes the signed margins through a transport plan onto target
candidates (mean over linked sources), and ranks targets by the transferred
score. Baselines: max animal confidence, breaking ties, seeded random.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .candidates import TRUE_POSITIVE, CandidateSet
from .ot import TransportPlan

CRITERIA = ("transfer_sampling", "max_confidence", "breaking_ties", "random")
SCORE_KINDS = ("svm_margin", "transferred", "confidence", "breaking_ties", "random")


@dataclass(frozen=True)
class TrainingReport:
    final_hinge_loss: float
    margin_violations: int
    misclassified: int
    epochs: int


@dataclass(frozen=True)
class LinearRanker:
    """Linear scorer s(z) = <w, z> + b; positive side = true positives."""

    weights: np.ndarray
    bias: float
    report: TrainingReport

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if not np.all(np.isfinite(w)) or not np.isfinite(self.bias):
            raise ValueError("ranker has non-finite parameters")
        w.setflags(write=False)

    def score(self, features: np.ndarray) -> np.ndarray:
        X = np.asarray(features, dtype=np.float64)
        return X @ self.weights + self.bias


@dataclass(frozen=True)
class ScoreVector:
    """Per-candidate scores aligned to a CandidateSet by position.

    For kind='transferred', entries with no transport link are flagged in
    `unlinked` and hold NaN; every ranking places them last.
    """

    scores: np.ndarray
    kind: str
    unlinked: np.ndarray = None  # bool mask, lazily defaulted to all-False

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "scores", s)
        if self.kind not in SCORE_KINDS:
            raise ValueError(f"unknown score kind {self.kind!r}")
        mask = self.unlinked
        if mask is None:
            mask = np.zeros(s.shape, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != s.shape:
            raise ValueError("unlinked mask misaligned with scores")
        object.__setattr__(self, "unlinked", mask)
        if not np.all(np.isfinite(s[~mask])):
            raise ValueError("non-finite score on a linked entry")
        s.setflags(write=False)
        mask.setflags(write=False)

    def __len__(self) -> int:
        return len(self.scores)


# ---------------------------------------------------------------------------
# Margin ranker
# ---------------------------------------------------------------------------

def train_margin_ranker(
    source: CandidateSet,
    C_reg: float = 1.0,
    epochs: int = 2000,
    seed: int = 0,
) -> LinearRanker:
    """Hinge loss + L2, full-batch subgradient descent from zero weights.

    Class weights are inversely proportional to class frequency. The full
    batch makes the fit deterministic; `seed` is accepted for interface
    stability but no randomness remains to consume it.
    """
    if C_reg <= 0:
        raise ValueError("C_reg must be positive")
    y = np.array([1.0 if c.gt_label == TRUE_POSITIVE else -1.0 for c in source])
    n = len(y)
    n_pos = int((y > 0).sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(
            f"margin ranker needs both classes, got {n_pos} positive / "
            f"{n_neg} negative"
        )
    X = source.features
    cw = np.where(y > 0, n / (2.0 * n_pos), n / (2.0 * n_neg))

    lam = 1.0 / (C_reg * n)
    w = np.zeros(X.shape[1])
    b = 0.0
    for t in range(1, epochs + 1):
        margins = y * (X @ w + b)
        active = margins < 1.0
        coef = (cw * y * active) / n
        eta = 1.0 / (lam * t)
        w = (1.0 - eta * lam) * w + eta * (coef @ X)
        b = b + eta * float(coef.sum())

    margins = y * (X @ w + b)
    violations = int((margins < 1.0).sum())
    misclassified = int((margins <= 0.0).sum())
    hinge = float((cw * np.maximum(0.0, 1.0 - margins)).mean())
    report = TrainingReport(
        final_hinge_loss=hinge,
        margin_violations=violations,
        misclassified=misclassified,
        epochs=epochs,
    )
    return LinearRanker(weights=w, bias=float(b), report=report)


def margin_scores(ranker: LinearRanker, cset: CandidateSet) -> ScoreVector:
    return ScoreVector(scores=ranker.score(cset.features), kind="svm_margin")


# ---------------------------------------------------------------------------
# Score transport
# ---------------------------------------------------------------------------

def transfer_scores(plan: TransportPlan, s_src: ScoreVector) -> ScoreVector:
    """Mean source score over transport links, per target.

    s_j = (1/N_j) * sum_i s_i * [gamma_ij > 0], with N_j the link count.
    Targets with N_j = 0 are marked unlinked and carry NaN.
    """
    if len(s_src) != plan.n_s:
        raise ValueError(
            f"source scores ({len(s_src)}) do not match plan rows ({plan.n_s})"
        )
    rows, cols, _ = plan.link_arrays
    sums = np.bincount(cols, weights=s_src.scores[rows], minlength=plan.n_t)
    counts = np.bincount(cols, minlength=plan.n_t).astype(np.float64)
    linked = counts > 0
    out = np.full(plan.n_t, np.nan)
    out[linked] = sums[linked] / counts[linked]
    return ScoreVector(scores=out, kind="transferred", unlinked=~linked)


# ---------------------------------------------------------------------------
# Ranking criteria
# ---------------------------------------------------------------------------

def _order(indices: Sequence[int], keys) -> list[int]:
    return sorted(indices, key=keys)


def rank(
    criterion: str,
    target: CandidateSet,
    plan: TransportPlan | None = None,
    s_src: ScoreVector | None = None,
    seed: int | None = None,
) -> list[str]:
    """Total priority order over target candidate ids, best first.

    All scalar ties break toward the ascending candidate_id.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}")
    ids = target.ids
    n = len(ids)
    idx = range(n)

    if criterion == "max_confidence":
        conf = target.animal_confidence
        order = _order(idx, lambda i: (-conf[i], ids[i]))
    elif criterion == "breaking_ties":
        conf = target.confidences
        if n:
            top2 = np.sort(conf, axis=1)[:, -2:]
            gap = top2[:, 1] - top2[:, 0]
        else:
            gap = np.zeros(0)
        order = _order(idx, lambda i: (gap[i], ids[i]))
    elif criterion == "random":
        if seed is None:
            raise ValueError("random criterion requires a seed")
        rng = np.random.default_rng(seed)
        perm = rng.permutation(n)
        order = list(perm)
    else:  # transfer_sampling
        if plan is None or s_src is None:
            raise ValueError("transfer_sampling requires plan and s_src")
        s_tgt = transfer_scores(plan, s_src)
        if len(s_tgt) != n:
            raise ValueError(
                f"plan targets ({len(s_tgt)}) do not match candidate set ({n})"
            )
        conf = target.animal_confidence
        linked = [i for i in idx if not s_tgt.unlinked[i]]
        unlinked = [i for i in idx if s_tgt.unlinked[i]]
        order = _order(linked, lambda i: (-s_tgt.scores[i], ids[i]))
        order += _order(unlinked, lambda i: (-conf[i], ids[i]))

    return [ids[i] for i in order]


def ranking_scores(
    criterion: str,
    target: CandidateSet,
    plan: TransportPlan | None = None,
    s_src: ScoreVector | None = None,
) -> ScoreVector:
    """The scalar score that `rank` sorts by, aligned to the candidate set."""
    if criterion == "max_confidence":
        return ScoreVector(scores=target.animal_confidence.copy(), kind="confidence")
    if criterion == "breaking_ties":
        conf = target.confidences
        top2 = np.sort(conf, axis=1)[:, -2:]
        return ScoreVector(scores=top2[:, 1] - top2[:, 0], kind="breaking_ties")
    if criterion == "transfer_sampling":
        if plan is None or s_src is None:
            raise ValueError("transfer_sampling requires plan and s_src")
        return transfer_scores(plan, s_src)
    raise ValueError(f"no score vector for criterion {criterion!r}")


def save_ranking_csv(
    path: str | Path, ranked_ids: Sequence[str], scores: Sequence[float]
) -> None:
    if len(ranked_ids) != len(scores):
        raise ValueError("ids and scores must align")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "candidate_id", "score"])
        for r, (cid, s) in enumerate(zip(ranked_ids, scores), start=1):
            writer.writerow([r, cid, repr(float(s))])
