"""Margin ranking objective over an in-batch similarity matrix.

The loss consumes only the square similarity matrix S (diagonal = true
pairs), so the same code serves caption-image and caption-caption batches.
The default variant penalizes, per positive pair and per direction, only the
hardest in-batch negative ("max of hinges"); the comparison variant sums the
hinge over all negatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .numerics import GradCheckReport, REL_ERR_FLOOR

MAX_OF_HINGES = "max-of-hinges"
SUM_OF_HINGES = "sum-of-hinges"


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.2
    variant: str = MAX_OF_HINGES

    def __post_init__(self):
        if not self.margin > 0:
            raise ConfigurationError(f"margin must be positive, got {self.margin}")
        if self.variant not in (MAX_OF_HINGES, SUM_OF_HINGES):
            raise ConfigurationError(f"unknown loss variant {self.variant!r}")


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray  # d loss / d S, zero wherever the hinge is inactive


def ranking_loss(S: np.ndarray, config: LossConfig = LossConfig()) -> LossOutput:
    """Bidirectional hinge ranking loss on a batch similarity matrix.

    Per positive pair i the row term compares S[i, i] against S[i, j] (wrong
    partner for query i) and the column term against S[j, i] (query j stealing
    i's partner); contributions below the margin are clipped to zero. The
    total is the sum over pairs. A batch of one has no negatives and scores 0.
    Ties in the max variant send gradient to the lowest-index maximizer.
    """
    S = np.asarray(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"similarity matrix must be square, got {S.shape}")
    n = S.shape[0]
    grad = np.zeros_like(S)
    if n == 1:
        return LossOutput(0.0, grad)

    alpha = S.dtype.type(config.margin)
    diag = S.diagonal()
    # row_terms[i, j] = alpha - S[i, i] + S[i, j]; col_terms[j, i] covers S[j, i].
    row_terms = alpha - diag[:, None] + S
    col_terms = alpha - diag[None, :] + S
    off = ~np.eye(n, dtype=bool)

    if config.variant == MAX_OF_HINGES:
        neg_inf = -np.inf
        row_masked = np.where(off, row_terms, neg_inf)
        col_masked = np.where(off, col_terms, neg_inf)
        row_best = row_masked.max(axis=1)
        col_best = col_masked.max(axis=0)
        row_arg = row_masked.argmax(axis=1)  # first (lowest-index) maximizer
        col_arg = col_masked.argmax(axis=0)
        value = float(np.clip(row_best, 0, None).sum() + np.clip(col_best, 0, None).sum())
        row_active = row_best > 0
        col_active = col_best > 0
        rows = np.arange(n)
        np.add.at(grad, (rows[row_active], row_arg[row_active]), 1)
        np.add.at(grad, (rows[row_active], rows[row_active]), -1)
        np.add.at(grad, (col_arg[col_active], rows[col_active]), 1)
        np.add.at(grad, (rows[col_active], rows[col_active]), -1)
    else:
        row_hinge = np.where(off, np.clip(row_terms, 0, None), 0)
        col_hinge = np.where(off, np.clip(col_terms, 0, None), 0)
        value = float(row_hinge.sum() + col_hinge.sum())
        row_active = row_hinge > 0
        col_active = col_hinge > 0
        grad += row_active
        grad += col_active
        d = np.zeros(n, dtype=S.dtype)
        d -= row_active.sum(axis=1)
        d -= col_active.sum(axis=0)
        grad[np.arange(n), np.arange(n)] += d
    return LossOutput(value, grad)


def loss_backward_check(config: LossConfig = LossConfig(), n: int = 4, seed: int = 0,
                        h: float = 1e-6, tolerance: float = 1e-6,
                        kink_margin: float = 1e-3) -> GradCheckReport:
    """Central-difference check of the loss gradient w.r.t. S.

    The loss is piecewise linear in S, so away from hinge kinks the numeric
    gradient matches exactly; candidate matrices with any hinge argument
    within ``kink_margin`` of zero are rejected and resampled.
    """
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        S = rng.uniform(-1.0, 1.0, size=(n, n))
        if _kink_distance(S, config.margin) >= kink_margin:
            break
    else:  # pragma: no cover - vanishing probability
        raise ConfigurationError("could not sample a kink-free similarity matrix")
    analytic = ranking_loss(S, config).grad
    worst = 0.0
    for i in range(n):
        for j in range(n):
            orig = S[i, j]
            S[i, j] = orig + h
            f_plus = ranking_loss(S, config).value
            S[i, j] = orig - h
            f_minus = ranking_loss(S, config).value
            S[i, j] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            rel = abs(analytic[i, j] - numeric) / max(abs(analytic[i, j]), abs(numeric), REL_ERR_FLOOR)
            worst = max(worst, rel)
    return GradCheckReport(
        max_rel_error={"similarity": worst},
        passed=worst < tolerance,
        tolerance=tolerance,
    )


def _kink_distance(S: np.ndarray, margin: float) -> float:
    """Smallest |hinge argument| over all off-diagonal contrastive terms."""
    n = S.shape[0]
    diag = S.diagonal()
    row_terms = margin - diag[:, None] + S
    col_terms = margin - diag[None, :] + S
    off = ~np.eye(n, dtype=bool)
    return float(min(np.abs(row_terms[off]).min(), np.abs(col_terms[off]).min()))
