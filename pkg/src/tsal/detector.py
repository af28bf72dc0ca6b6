"""Linear surrogate scorer over candidate features.

A logistic model (weights + bias over the latent features) stands in for a
full image detector: it maps each candidate to the 3-class confidence
convention, with the border class pinned at a small fixed mass. Fitting uses
damped Newton iterations on the class-weighted logistic loss, optionally with
a proximal pull toward a set of anchor weights for warm-started refits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .candidates import TRUE_POSITIVE, CandidateSet

BORDER_MASS = 0.02
DEFAULT_L2 = 1e-4
DEFAULT_PROX = 0.1


class DetectorFitError(RuntimeError):
    """Raised when the logistic fit diverges; carries the last finite loss."""

    def __init__(self, message: str, final_loss: float):
        super().__init__(f"{message} (final loss {final_loss!r})")
        self.final_loss = final_loss


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class SurrogateDetector:
    weights: np.ndarray
    bias: float
    border_mass: float = BORDER_MASS

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1:
            raise ValueError("weights must be a vector")
        if not np.all(np.isfinite(w)) or not np.isfinite(self.bias):
            raise ValueError("detector parameters must be finite")
        if not 0.0 < self.border_mass < 1.0:
            raise ValueError("border_mass must be in (0, 1)")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def d(self) -> int:
        return self.weights.shape[0]

    def scores(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X @ self.weights + self.bias

    def animal_probability(self, X: np.ndarray) -> np.ndarray:
        return sigmoid(self.scores(X))

    def confidences(self, X: np.ndarray) -> np.ndarray:
        """n x 3 matrix (background, animal, border), rows summing to 1."""
        p = self.animal_probability(X)
        body = 1.0 - self.border_mass
        out = np.empty((p.shape[0], 3))
        out[:, 0] = body * (1.0 - p)
        out[:, 1] = body * p
        out[:, 2] = self.border_mass
        return out

    def predict(self, cset: CandidateSet) -> CandidateSet:
        return cset.with_confidences(self.confidences(cset.features))


def _loss(z, y, sw, w, l2, prox, anchor_w, anchor_b, b):
    data = float(np.mean(sw * np.logaddexp(0.0, (1.0 - 2.0 * y) * z)))
    reg = 0.5 * l2 * float(w @ w)
    if prox > 0.0:
        dw = w - anchor_w
        db = b - anchor_b
        reg += 0.5 * prox * (float(dw @ dw) + db * db)
    return data + reg


def fit_logistic(
    X: np.ndarray,
    y: np.ndarray,
    sample_weight: Optional[np.ndarray] = None,
    init: Optional[tuple[np.ndarray, float]] = None,
    l2: float = DEFAULT_L2,
    prox: float = 0.0,
    anchor: Optional[tuple[np.ndarray, float]] = None,
    max_iter: int = 100,
    tol: float = 1e-12,
) -> tuple[np.ndarray, float, float, int]:
    """Damped Newton fit of weighted logistic regression.

    Minimizes mean_i sw_i * bce(x_i @ w + b, y_i) + l2/2 ||w||^2
    + prox/2 ||(w, b) - anchor||^2. Returns (weights, bias, final_loss,
    iterations). Non-finite losses raise DetectorFitError.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    sw = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    w, b = (np.zeros(d), 0.0) if init is None else (np.array(init[0], dtype=np.float64), float(init[1]))
    anchor_w, anchor_b = (np.zeros(d), 0.0) if anchor is None else (
        np.asarray(anchor[0], dtype=np.float64),
        float(anchor[1]),
    )

    z = X @ w + b
    loss = _loss(z, y, sw, w, l2, prox, anchor_w, anchor_b, b)
    if not np.isfinite(loss):
        raise DetectorFitError("non-finite initial loss", loss)

    it = 0
    for it in range(1, max_iter + 1):
        p = sigmoid(z)
        gz = sw * (p - y) / n
        grad_w = X.T @ gz + l2 * w
        grad_b = float(np.sum(gz))
        if prox > 0.0:
            grad_w = grad_w + prox * (w - anchor_w)
            grad_b += prox * (b - anchor_b)
        grad = np.concatenate([grad_w, [grad_b]])
        if not np.all(np.isfinite(grad)):
            raise DetectorFitError("non-finite gradient", loss)

        h = sw * p * (1.0 - p) / n + 1e-12
        H = np.empty((d + 1, d + 1))
        Xh = X * h[:, None]
        H[:d, :d] = X.T @ Xh + (l2 + prox) * np.eye(d)
        H[:d, d] = Xh.sum(axis=0)
        H[d, :d] = H[:d, d]
        H[d, d] = float(np.sum(h)) + prox + 1e-12
        try:
            step = np.linalg.solve(H, -grad)
        except np.linalg.LinAlgError:
            step = -grad

        descent = float(grad @ step)
        if descent > 0:
            step = -grad
            descent = -float(grad @ grad)
        t = 1.0
        improved = False
        for _ in range(50):
            w_try = w + t * step[:d]
            b_try = b + t * step[d]
            z_try = X @ w_try + b_try
            loss_try = _loss(z_try, y, sw, w_try, l2, prox, anchor_w, anchor_b, b_try)
            if np.isfinite(loss_try) and loss_try <= loss + 1e-4 * t * descent:
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        w, b, z = w_try, b_try, z_try
        prev_loss, loss = loss, loss_try
        if not np.isfinite(loss):
            raise DetectorFitError("loss diverged", loss)
        if abs(prev_loss - loss) <= tol * max(1.0, abs(loss)):
            break

    return w, b, loss, it


def class_balanced_weights(y: np.ndarray) -> np.ndarray:
    """Inverse class-frequency weights: n / (2 * n_class) per sample."""
    y = np.asarray(y)
    n = y.shape[0]
    n_pos = int(np.sum(y == 1))
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes required for balanced weights")
    sw = np.where(y == 1, n / (2.0 * n_pos), n / (2.0 * n_neg))
    return sw


def fit_detector(X: np.ndarray, y: np.ndarray, seed: int = 0, l2: float = DEFAULT_L2) -> SurrogateDetector:
    """Fit a fresh detector from zero init; the fit is deterministic, the seed
    argument is accepted for interface stability."""
    del seed
    sw = class_balanced_weights(y)
    w, b, _, _ = fit_logistic(X, y, sample_weight=sw, l2=l2)
    return SurrogateDetector(weights=w, bias=b)


@dataclass(frozen=True)
class UpdateResult:
    detector: SurrogateDetector
    skipped: bool
    reason: Optional[str]
    final_loss: Optional[float]
    iterations: int


def update_surrogate(
    detector: SurrogateDetector,
    X: np.ndarray,
    y: np.ndarray,
    source_anchor: Optional[tuple[np.ndarray, float]] = None,
    l2: float = DEFAULT_L2,
    prox: float = DEFAULT_PROX,
    seed: int = 0,
) -> UpdateResult:
    """Refit on labeled target candidates, warm-started from the current
    weights with a proximal pull toward the source anchor.

    A labeled set with a single class (for example background only) skips the
    update and reports why rather than fitting a degenerate separator.
    """
    del seed
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("labeled set is empty")
    if X.shape[1] != detector.d:
        raise ValueError(f"feature dimension {X.shape[1]} != detector dimension {detector.d}")
    classes = np.unique(y)
    if classes.shape[0] < 2:
        tag = "background" if (classes.shape[0] and classes[0] == 0) else "animal"
        return UpdateResult(
            detector=detector,
            skipped=True,
            reason=f"single_class_labels:{tag}",
            final_loss=None,
            iterations=0,
        )
    anchor = source_anchor if source_anchor is not None else (detector.weights, detector.bias)
    sw = class_balanced_weights(y)
    w, b, loss, iters = fit_logistic(
        X,
        y,
        sample_weight=sw,
        init=(detector.weights, detector.bias),
        l2=l2,
        prox=prox,
        anchor=anchor,
    )
    return UpdateResult(
        detector=SurrogateDetector(weights=w, bias=b, border_mass=detector.border_mass),
        skipped=False,
        reason=None,
        final_loss=loss,
        iterations=iters,
    )


def pool_labels(pool: CandidateSet) -> np.ndarray:
    """0/1 vector over a pool: 1 where gt_label is true_positive."""
    return np.array([1.0 if g == TRUE_POSITIVE else 0.0 for g in pool.gt_labels])
