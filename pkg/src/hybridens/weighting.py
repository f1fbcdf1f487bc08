"""Convex-combination ensemble weights.

The weights live on the probability simplex and are fit by projected
gradient descent on mean binary cross-entropy over a validation prediction
matrix.  The problem is convex in the weights, so descent with backtracking
reaches the optimum; projection keeps every iterate feasible.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError

BCE_EPS = 1e-12
CONVERGENCE_TOL = 1e-10
MAX_HALVINGS = 30


def weighted_predict(alpha: np.ndarray, p: np.ndarray) -> float | np.ndarray:
    """Convex combination alpha . p; accepts a single row or an (N, K) matrix."""
    alpha = np.asarray(alpha, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != alpha.shape[0]:
        raise ValueError(f"dimension mismatch: alpha has {alpha.shape[0]}, p has {p.shape[-1]}")
    out = p @ alpha
    return float(out) if out.ndim == 0 else out


def bce_loss(p_hat: float, y: int) -> float:
    """Binary cross-entropy with the probability clamped to [eps, 1-eps]."""
    q = min(max(float(p_hat), BCE_EPS), 1.0 - BCE_EPS)
    return -(y * np.log(q) + (1 - y) * np.log(1.0 - q))


def mean_bce(p_hat: np.ndarray, labels: np.ndarray) -> float:
    q = np.clip(np.asarray(p_hat, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(q) + (1.0 - y) * np.log(1.0 - q)))


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-and-threshold)."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ValueError(f"expected a nonempty 1-D vector, got shape {v.shape}")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.nonzero(u * np.arange(1, v.size + 1) > css)[0][-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def bce_gradient(alpha: np.ndarray, preds: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of mean BCE with respect to the ensemble weights."""
    q = np.clip(preds @ alpha, BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(labels, dtype=np.float64)
    coeff = (q - y) / (q * (1.0 - q))
    return preds.T @ coeff / len(y)


@dataclass
class WeightFit:
    """Learned simplex weights plus the diagnostics the run report persists."""

    alpha: np.ndarray
    val_bce: float
    steps_used: int
    iterates: list[np.ndarray] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "alpha": [float(a) for a in self.alpha],
            "val_bce": self.val_bce,
            "steps_used": self.steps_used,
        }


def optimize_weights(
    preds: np.ndarray,
    labels: np.ndarray,
    steps: int = 500,
    step_size: float = 0.5,
) -> WeightFit:
    """Projected gradient descent from uniform weights.

    A step that would increase the objective is retried at half the step
    size (up to 30 halvings), so the accepted objective sequence is
    non-increasing and the returned weights never score worse than uniform.
    Stops early once the iterate moves less than 1e-10 in max norm.
    """
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.ndim != 2 or preds.shape[0] != labels.shape[0]:
        raise ValueError(f"predictions {preds.shape} do not match {labels.shape[0]} labels")
    n, k = preds.shape
    if n < 1:
        raise ValueError("need at least one validation row")
    if labels.min() == labels.max():
        warnings.warn("optimizing ensemble weights on a single-class validation set")
    alpha = np.full(k, 1.0 / k)
    loss = mean_bce(preds @ alpha, labels)
    iterates = [alpha.copy()]
    used = 0
    for _ in range(steps):
        grad = bce_gradient(alpha, preds, labels)
        if not np.all(np.isfinite(grad)) or not np.isfinite(loss):
            raise NumericError(
                f"non-finite objective or gradient after {used} accepted steps"
            )
        size = step_size
        candidate, cand_loss = alpha, loss
        for _ in range(MAX_HALVINGS):
            trial = project_simplex(alpha - size * grad)
            trial_loss = mean_bce(preds @ trial, labels)
            if trial_loss <= loss:
                candidate, cand_loss = trial, trial_loss
                break
            size *= 0.5
        if candidate is alpha:
            break
        used += 1
        moved = float(np.max(np.abs(candidate - alpha)))
        alpha, loss = candidate, cand_loss
        iterates.append(alpha.copy())
        if moved < CONVERGENCE_TOL:
            break
    return WeightFit(alpha=alpha, val_bce=loss, steps_used=used, iterates=iterates)
