"""Representation-space probes: Gaussian (Fréchet) distance, spectrum measures, CKA.

Per-sequence hidden summaries are treated as weighted point clouds
(EmpiricalMeasure); a Gaussian fit of such a cloud supports the squared
Fréchet distance

    d_F^2 = |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2}),

and the covariance spectrum supports

    effrank = exp(-sum p_i log p_i),   PR = (sum l_i)^2 / sum l_i^2,

with p_i = l_i / sum l_j.  Matrix square roots use symmetric eigendecomposition
with eigenvalues clamped at zero: dimensions stay small here, so stability
beats speed.  Covariances are unbiased (divide by B-1).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, ValidationError

_SYM_TOL = 1e-9
_EIG_FLOOR = -1e-9

# Counts floating-point clamps of negative d_F^2; diagnostics only.
negative_frechet_clamps = 0


@dataclass(frozen=True)
class GaussianSummary:
    """Mean and symmetric PSD covariance of a point cloud in R^d."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise DimensionMismatchError("cov must be d x d for a d-vector mean")
        if not np.allclose(cov, cov.T, atol=_SYM_TOL):
            raise ValidationError("covariance must be symmetric within 1e-9")
        eigvals = np.linalg.eigvalsh(0.5 * (cov + cov.T))
        if np.min(eigvals) < _EIG_FLOOR * max(1.0, float(np.max(np.abs(eigvals)))):
            raise ValidationError("covariance must be PSD (eigenvalues >= -1e-9)")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Uniform-weight point cloud of per-sequence summaries (one row each)."""

    points: np.ndarray
    normalised: bool = False

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if points.shape[0] < 1:
            raise ValidationError("measure needs at least one point")
        if self.normalised:
            norms = np.linalg.norm(points, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-9):
                raise ValidationError("normalised measure rows must have unit norm")
        object.__setattr__(self, "points", points)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.size, 1.0 / self.size)


@dataclass(frozen=True)
class Spectrum:
    """Nonincreasing nonnegative eigenvalues of a covariance."""

    eigenvalues: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        if lam.ndim != 1 or lam.size == 0:
            raise ValidationError("spectrum must be a non-empty 1-D vector")
        if np.any(lam < 0):
            raise ValidationError("eigenvalues must be nonnegative")
        if np.any(np.diff(lam) > 1e-12 * max(1.0, float(lam[0]))):
            raise ValidationError("eigenvalues must be sorted nonincreasing")
        object.__setattr__(self, "eigenvalues", lam)


def psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, eigenvalues clamped at 0."""
    sym = 0.5 * (mat + mat.T)
    eigvals, eigvecs = np.linalg.eigh(sym)
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    """Squared Fréchet distance between two Gaussian summaries (>= 0, clamped)."""
    global negative_frechet_clamps
    if a.dim != b.dim:
        raise DimensionMismatchError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    root_a = psd_sqrt(a.cov)
    cross = psd_sqrt(root_a @ b.cov @ root_a)
    val = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    if val < -1e-7:
        raise ValidationError(f"Fréchet distance {val} too negative to be roundoff")
    if val < 0.0:
        negative_frechet_clamps += 1
        warnings.warn("clamped slightly negative Fréchet distance to 0")
        val = 0.0
    return val


def effective_dims(s: Spectrum) -> dict:
    """Effective rank (entropy-based) and participation ratio of a spectrum."""
    s = s if isinstance(s, Spectrum) else Spectrum(s)
    lam = s.eigenvalues
    total = float(np.sum(lam))
    if total <= 0:
        raise ValidationError("spectrum must have at least one positive eigenvalue")
    p = lam / total
    pos = p[p > 0]
    effrank = math.exp(-float(np.sum(pos * np.log(pos))))
    pr = total * total / float(np.sum(lam * lam))
    return {"effrank": effrank, "participation_ratio": pr}


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA |Y^T X|_F^2 / (|X^T X|_F |Y^T Y|_F) on column-centred matrices.

    Invariant to orthogonal transforms and isotropic scaling of either argument.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[0] != y.shape[0]:
        raise DimensionMismatchError("X and Y need the same number of rows")
    if x.shape[0] < 2:
        raise ValidationError("CKA needs at least 2 rows")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    denom = np.linalg.norm(x.T @ x) * np.linalg.norm(y.T @ y)
    if denom <= 0:
        raise ValidationError("CKA undefined for an all-zero (constant) matrix")
    return float(np.linalg.norm(y.T @ x) ** 2 / denom)


def summarise_hidden(states: np.ndarray, mask: np.ndarray) -> tuple:
    """Per-sequence L2-normalised means of completion-token hidden vectors.

    states: (B, T, d) per-token vectors; mask: (B, T) boolean completion mask.
    Sequences whose mask is empty are dropped (counted, warned about) rather
    than raising, so long batches survive ragged data.

    Returns (EmpiricalMeasure, dropped_count).
    """
    states = np.asarray(states, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if states.ndim != 3 or mask.shape != states.shape[:2]:
        raise DimensionMismatchError("states must be (B,T,d) with a (B,T) mask")
    rows, dropped = [], 0
    for i in range(states.shape[0]):
        sel = mask[i]
        if not sel.any():
            dropped += 1
            continue
        mean = states[i][sel].mean(axis=0)
        norm = float(np.linalg.norm(mean))
        if norm <= 0:
            dropped += 1
            continue
        rows.append(mean / norm)
    if dropped:
        warnings.warn(f"dropped {dropped} sequence(s) with empty completion mask")
    if not rows:
        raise ValidationError("no sequence had an unmasked completion token")
    return EmpiricalMeasure(np.stack(rows), normalised=True), dropped


def fit_gaussian(measure: EmpiricalMeasure) -> GaussianSummary:
    """Unbiased Gaussian fit (mean, covariance with B-1 denominator); needs B >= 2."""
    if measure.size < 2:
        raise ValidationError("Gaussian fit needs at least 2 points")
    pts = measure.points
    mean = pts.mean(axis=0)
    centred = pts - mean
    cov = centred.T @ centred / (measure.size - 1)
    return GaussianSummary(mean, cov)


def covariance_spectrum(measure: EmpiricalMeasure) -> Spectrum:
    """Descending eigenvalues of the unbiased covariance of a measure."""
    cov = fit_gaussian(measure).cov
    lam = np.linalg.eigvalsh(cov)[::-1]
    return Spectrum(np.clip(lam, 0.0, None))


# ---------- CSV round-trip ----------

def write_measure_csv(measure: EmpiricalMeasure, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"dim={measure.dim},normalised={measure.normalised}\n")
        for row in measure.points:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_measure_csv(path) -> EmpiricalMeasure:
    with open(path, newline="") as fh:
        header = fh.readline().strip()
        try:
            dim_part, norm_part = header.split(",")
            dim = int(dim_part.split("=")[1])
            normalised = norm_part.split("=")[1] == "True"
        except (ValueError, IndexError) as exc:
            raise ValidationError(f"bad measure CSV header: {header!r}") from exc
        rows = [[float(v) for v in line.strip().split(",")] for line in fh if line.strip()]
    points = np.asarray(rows, dtype=float)
    if points.ndim != 2 or points.shape[1] != dim:
        raise ValidationError("measure CSV rows do not match declared dim")
    return EmpiricalMeasure(points, normalised=normalised)
