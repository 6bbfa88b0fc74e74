"""Sequence-score critic, row/column InfoNCE, contrastive MI bounds, diagnostics.

The score matrix L collects normalised sequence log-scores between completions
(rows) and principle-conditioned prompts (columns).  On a square matrix:

    row loss  = -(1/N) sum_i log softmax_j(L_i.)|_{j=i}
    col loss  = -(1/N) sum_j log softmax_i(L_.j)|_{i=j}
    auxiliary = lam_row * row + lam_col * col
    diag stat = (mean row log-softmax diagonal + mean col log-softmax diagonal) / 2

On an (N, K+1) candidate block with the positive in column 0, the contrastive
bound is log(K+1) minus the empirical InfoNCE loss; it can never exceed
log(K+1) and goes negative for worse-than-chance association (the sign is
kept).  Shadow candidates are drawn uniformly from the positive pool without
replacement, excluding the true principle.

Score normalisation modes: raw_sum (plain log-likelihood sum), length_mean
(divide by token count; the default everywhere), fisher_weighted (token
weights w_t proportional to p_t(1-p_t), normalised over completion tokens;
available for the auxiliary only).  Row standardisation ((L - mu_i)/sigma_i)
exists solely for the reward channel's z statistic and never touches the
auxiliary loss; a constant row (sigma_i = 0) standardises to all zeros.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

NORMALISATIONS = ("raw_sum", "length_mean", "fisher_weighted")


@dataclass(frozen=True)
class ScoreMatrix:
    """N x M matrix of sequence log-scores plus the normalisation used."""

    scores: np.ndarray
    normalisation: str = "length_mean"

    def __post_init__(self):
        scores = np.atleast_2d(np.asarray(self.scores, dtype=float))
        if not np.all(np.isfinite(scores)):
            raise ValidationError("score matrix entries must be finite")
        if self.normalisation not in NORMALISATIONS:
            raise ValidationError(f"unknown normalisation {self.normalisation!r}")
        object.__setattr__(self, "scores", scores)

    @property
    def shape(self) -> tuple:
        return self.scores.shape

    def row_stats(self) -> tuple:
        """Per-row mean and population std (sigma may be 0 for constant rows)."""
        return self.scores.mean(axis=1), self.scores.std(axis=1)

    def standardised(self) -> np.ndarray:
        """(L - mu_i) / sigma_i per row; constant rows map to all-zero rows."""
        mu, sigma = self.row_stats()
        safe = np.where(sigma > 0, sigma, 1.0)
        out = (self.scores - mu[:, None]) / safe[:, None]
        out[sigma == 0] = 0.0
        return out


def _scores_of(matrix) -> np.ndarray:
    if isinstance(matrix, ScoreMatrix):
        return matrix.scores
    return np.atleast_2d(np.asarray(matrix, dtype=float))


def _log_softmax(arr: np.ndarray, axis: int) -> np.ndarray:
    shifted = arr - np.max(arr, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


# ---------- sequence scores ----------

def sequence_score(policy, prompt, principle, completion,
                   normalisation: str = "length_mean") -> float:
    """Normalised sequence log-score of a completion under a rendered prompt (nats).

    The policy only needs a `token_logprobs(prompt, principle, completion)`
    method returning per-token log-probabilities of the completion tokens.
    """
    logps = np.asarray(policy.token_logprobs(prompt, principle, completion), dtype=float)
    return score_from_token_logprobs(logps, normalisation)


def score_from_token_logprobs(token_logprobs: np.ndarray,
                              normalisation: str = "length_mean") -> float:
    token_logprobs = np.asarray(token_logprobs, dtype=float)
    if normalisation not in NORMALISATIONS:
        raise ValidationError(f"unknown normalisation {normalisation!r}")
    if token_logprobs.size == 0:
        return 0.0
    if normalisation == "raw_sum":
        return float(np.sum(token_logprobs))
    if normalisation == "length_mean":
        return float(np.mean(token_logprobs))
    weights = fisher_token_weights(token_logprobs)
    return float(np.sum(weights * token_logprobs))


def fisher_token_weights(token_logprobs: np.ndarray) -> np.ndarray:
    """w_t proportional to p_t(1-p_t), normalised to sum 1 over completion tokens.

    Diagonal Fisher proxy for softmax outputs; collapses to uniform weights
    when all w_t vanish (deterministic tokens) so the score stays defined.
    """
    p = np.exp(np.asarray(token_logprobs, dtype=float))
    raw = p * (1.0 - p)
    total = float(np.sum(raw))
    if total <= 1e-300:
        return np.full(p.size, 1.0 / p.size)
    return raw / total


# ---------- InfoNCE on square matrices ----------

def infonce_losses(matrix) -> dict:
    """Row and column InfoNCE losses of a square score matrix (both >= 0)."""
    scores = _scores_of(matrix)
    n, m = scores.shape
    if n != m:
        raise ValidationError(f"InfoNCE needs a square matrix, got {n}x{m}")
    row_ls = _log_softmax(scores, axis=1)
    col_ls = _log_softmax(scores, axis=0)
    diag = np.arange(n)
    row_loss = float(-np.mean(row_ls[diag, diag]))
    col_loss = float(-np.mean(col_ls[diag, diag]))
    return {"row_loss": max(0.0, row_loss), "col_loss": max(0.0, col_loss)}


def sami_aux(matrix, lam_row: float, lam_col: float) -> float:
    """Symmetric InfoNCE auxiliary: lam_row * row loss + lam_col * col loss."""
    if lam_row < 0 or lam_col < 0:
        raise ValidationError("mixing weights must be nonnegative")
    losses = infonce_losses(matrix)
    return lam_row * losses["row_loss"] + lam_col * losses["col_loss"]


def diag_mi(matrix) -> float:
    """Diagonal PMI-like statistic: mean row/col log-softmax diagonal, halved.

    Always <= 0, with equality only in the 1x1 case.
    """
    scores = _scores_of(matrix)
    n, m = scores.shape
    if n != m:
        raise ValidationError(f"diag statistic needs a square matrix, got {n}x{m}")
    diag = np.arange(n)
    row_term = float(np.mean(_log_softmax(scores, axis=1)[diag, diag]))
    col_term = float(np.mean(_log_softmax(scores, axis=0)[diag, diag]))
    return min(0.0, 0.5 * (row_term + col_term))


def shaping_term(matrix, quantile_mask, weight: float) -> float:
    """weight * mean over masked rows of the centred diagonal cross-entropy.

    The statistic is e_i = -log softmax_row(L)|_{ii} centred on the full-batch
    mean, so any constant shift of the scores cancels and the term stays
    gradient-stable.  Empty mask or zero weight contribute nothing.
    """
    if weight < 0:
        raise ValidationError("shaping weight must be nonnegative")
    if weight == 0.0:
        return 0.0
    scores = _scores_of(matrix)
    n, m = scores.shape
    if n != m:
        raise ValidationError("shaping term needs a square matrix")
    mask = np.asarray(quantile_mask, dtype=bool)
    if mask.shape != (n,):
        raise ValidationError("mask length must equal the row count")
    if not mask.any():
        return 0.0
    diag = np.arange(n)
    cross_entropy = -_log_softmax(scores, axis=1)[diag, diag]
    centred = cross_entropy - cross_entropy.mean()
    return float(weight * centred[mask].mean())


# ---------- contrastive bounds with shadow candidates ----------

@dataclass(frozen=True)
class ShadowDraw:
    """K shadow principle ids for one example; the true principle is excluded."""

    shadow_ids: tuple
    with_replacement: bool = False
    positive_index: int = 0


def draw_shadows(pool_ids, true_id, k: int, rng: np.random.Generator) -> ShadowDraw:
    """Uniform shadows from the positive pool, without replacement when possible.

    A pool with fewer than k alternatives falls back to replacement and says so.
    """
    if k < 1:
        raise ValidationError("need at least one shadow")
    candidates = [pid for pid in pool_ids if pid != true_id]
    if not candidates:
        raise ValidationError("shadow pool contains no alternative to the true principle")
    if len(candidates) >= k:
        picked = rng.choice(len(candidates), size=k, replace=False)
        return ShadowDraw(tuple(candidates[int(i)] for i in picked))
    picked = rng.choice(len(candidates), size=k, replace=True)
    return ShadowDraw(tuple(candidates[int(i)] for i in picked), with_replacement=True)


def infonce_bound(candidate_scores: np.ndarray, positive_index: int = 0) -> float:
    """log(K+1) - InfoNCE loss over (n, K+1) candidate scores; ceiling log(K+1).

    Equal scores give exactly 0 (chance level); the value may be negative and
    is reported as-is.
    """
    scores = np.atleast_2d(np.asarray(candidate_scores, dtype=float))
    n, cands = scores.shape
    if cands < 2:
        raise ValidationError("need the positive plus at least one shadow")
    log_sm = _log_softmax(scores, axis=1)
    loss = float(-np.mean(log_sm[:, positive_index]))
    return math.log(cands) - loss


@dataclass(frozen=True)
class BoundBatch:
    """Candidate scores for the clean bounds; positives sit in column 0.

    row_scores[i]: completion i scored under {true principle, K shadows}.
    col_scores[i]: {true completion, K shadow completions} scored under
    completion i's own rendered prompt.
    """

    row_scores: np.ndarray
    col_scores: np.ndarray

    def __post_init__(self):
        row = np.atleast_2d(np.asarray(self.row_scores, dtype=float))
        col = np.atleast_2d(np.asarray(self.col_scores, dtype=float))
        if row.shape != col.shape:
            raise ValidationError("row and column candidate blocks must align")
        object.__setattr__(self, "row_scores", row)
        object.__setattr__(self, "col_scores", col)


def clean_mi_bounds(batch: BoundBatch, k: int, clean_mask) -> dict:
    """Row/column contrastive bounds over the clean subset, in nats.

    Returns {"row_bound", "col_bound", "gap", "clean_count"}; with zero clean
    rows the bounds are NaN and clean_count is 0.
    """
    if k < 1:
        raise ValidationError("k must be at least 1")
    if batch.row_scores.shape[1] != k + 1:
        raise ValidationError(f"expected {k + 1} candidates per row")
    mask = np.asarray(clean_mask, dtype=bool)
    if mask.shape != (batch.row_scores.shape[0],):
        raise ValidationError("clean mask length must match the batch")
    count = int(mask.sum())
    if count == 0:
        return {"row_bound": math.nan, "col_bound": math.nan,
                "gap": math.nan, "clean_count": 0}
    row = infonce_bound(batch.row_scores[mask])
    col = infonce_bound(batch.col_scores[mask])
    return {"row_bound": row, "col_bound": col, "gap": row - col, "clean_count": count}


def row_positive_logsoftmax(matrix, standardise: bool = True) -> np.ndarray:
    """z_i = log softmax over each row's candidates at the positive (column 0).

    Rows are standardised first by default; this is the reward channel's input
    and is never fed back into the auxiliary loss.
    """
    if isinstance(matrix, ScoreMatrix):
        scores = matrix.standardised() if standardise else matrix.scores
    else:
        scores = _scores_of(matrix)
        if standardise:
            scores = ScoreMatrix(scores).standardised()
    return _log_softmax(scores, axis=1)[:, 0]


# ---------- CSV round-trip (also the ingestion path for external scores) ----------

def write_score_csv(matrix: ScoreMatrix, path) -> None:
    n, m = matrix.shape
    with open(path, "w", newline="") as fh:
        fh.write(f"normalisation={matrix.normalisation},N={n},M={m}\n")
        for row in matrix.scores:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_score_csv(path) -> ScoreMatrix:
    with open(path, newline="") as fh:
        header = fh.readline().strip()
        try:
            fields = dict(part.split("=") for part in header.split(","))
            normalisation = fields["normalisation"]
            n, m = int(fields["N"]), int(fields["M"])
        except (ValueError, KeyError) as exc:
            raise ValidationError(f"bad score CSV header: {header!r}") from exc
        rows = [[float(v) for v in line.strip().split(",")] for line in fh if line.strip()]
    scores = np.asarray(rows, dtype=float)
    if scores.shape != (n, m):
        raise ValidationError(f"score CSV body {scores.shape} does not match header ({n},{m})")
    return ScoreMatrix(scores, normalisation=normalisation)
