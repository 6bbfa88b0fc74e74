"""Distances and angles between categorical distributions, plus training-path analysis.

All quantities derive from the Bhattacharyya coefficient BC(p,q) = sum_k sqrt(p_k q_k):

    bhat_angle  = arccos(BC)                  in [0, pi/2]
    bhat_dist   = -log(BC)
    hellinger   = sqrt(1 - BC)
    fr_distance = 2 * arccos(BC)              geodesic distance on the simplex
    JS(p||q)    = (KL(p||m) + KL(q||m)) / 2,  m = (p+q)/2   (nats; /ln2 for bits)

The sqrt map p -> sqrt(p) embeds the simplex isometrically (up to a factor 2)
into the unit sphere, which is what makes 2*arccos(BC) the geodesic distance
and lets path curvature be read off from chords between sqrt-embedded points.

Conventions: zero entries contribute 0 to KL terms when the numerator is 0;
reductions use fixed left-to-right summation so results are reproducible.
All functions are pure and safe to call concurrently.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatchError, ValidationError

PROBE_CSV_FIELDS = ("bc", "bhat_angle", "bhat_distance", "hellinger",
                    "js_nats", "js_bits", "fr_distance")

_NORM_TOL = 1e-9


@dataclass(frozen=True)
class ProbVector:
    """A point on the categorical simplex (e.g. a next-token distribution)."""

    probs: np.ndarray
    support_size: int = field(init=False)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size == 0:
            raise ValidationError("probs must be a non-empty 1-D vector")
        if np.any(probs < 0):
            raise ValidationError("probs must be nonnegative")
        total = float(np.sum(probs))
        if not math.isfinite(total) or abs(total - 1.0) > _NORM_TOL:
            raise ValidationError(f"probs must sum to 1 within {_NORM_TOL}, got {total!r}")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "support_size", probs.size)


@dataclass(frozen=True)
class ProbePath:
    """Ordered checkpoints of one distribution over training, same support each."""

    checkpoints: tuple
    labels: tuple

    def __post_init__(self):
        cps = tuple(cp if isinstance(cp, ProbVector) else ProbVector(cp)
                    for cp in self.checkpoints)
        if len(cps) < 2:
            raise ValidationError("a path needs at least 2 checkpoints")
        size = cps[0].support_size
        if any(cp.support_size != size for cp in cps):
            raise DimensionMismatchError("all checkpoints must share one support")
        labels = tuple(self.labels) if self.labels else tuple(range(len(cps)))
        if len(labels) != len(cps):
            raise ValidationError("labels must match checkpoint count")
        object.__setattr__(self, "checkpoints", cps)
        object.__setattr__(self, "labels", labels)


def _as_prob(p) -> ProbVector:
    return p if isinstance(p, ProbVector) else ProbVector(p)


def bhattacharyya_coefficient(p, q) -> float:
    """BC(p,q) = sum_k sqrt(p_k q_k), clipped into [0,1] against roundoff."""
    p, q = _as_prob(p), _as_prob(q)
    if p.support_size != q.support_size:
        raise DimensionMismatchError(
            f"support mismatch: {p.support_size} vs {q.support_size}")
    bc = float(np.sum(np.sqrt(p.probs * q.probs)))
    return min(max(bc, 0.0), 1.0)


def js_divergence_nats(p, q) -> float:
    """Jensen-Shannon divergence in nats; finite for any pair (m_k > 0 wherever needed)."""
    p, q = _as_prob(p), _as_prob(q)
    if p.support_size != q.support_size:
        raise DimensionMismatchError(
            f"support mismatch: {p.support_size} vs {q.support_size}")
    m = 0.5 * (p.probs + q.probs)

    def _kl(a: np.ndarray) -> float:
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / m[mask])))

    return max(0.0, 0.5 * _kl(p.probs) + 0.5 * _kl(q.probs))


def fr_distance(p, q) -> float:
    """Geodesic distance on the simplex: 2*arccos(BC)."""
    return 2.0 * math.acos(bhattacharyya_coefficient(p, q))


def probe_report(p, q) -> dict:
    """All output-distribution probes for one pair, as a flat record.

    Keys follow PROBE_CSV_FIELDS. bhat_distance is +inf for disjoint supports
    (BC = 0); everything else stays finite.
    """
    bc = bhattacharyya_coefficient(p, q)
    angle = math.acos(bc)
    js = js_divergence_nats(p, q)
    return {
        "bc": bc,
        "bhat_angle": angle,
        "bhat_distance": -math.log(bc) if bc > 0 else math.inf,
        "hellinger": math.sqrt(max(0.0, 1.0 - bc)),
        "js_nats": js,
        "js_bits": js / math.log(2),
        "fr_distance": 2.0 * angle,
    }


def probe_report_batch(pairs: Iterable) -> list:
    """probe_report over an iterable of (p, q) pairs."""
    return [probe_report(p, q) for p, q in pairs]


def write_probe_csv(records: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=PROBE_CSV_FIELDS)
        writer.writeheader()
        for rec in records:
            writer.writerow({k: repr(float(rec[k])) for k in PROBE_CSV_FIELDS})


def read_probe_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(PROBE_CSV_FIELDS):
            raise ValidationError(f"unexpected probe CSV header: {reader.fieldnames}")
        return [{k: float(row[k]) for k in PROBE_CSV_FIELDS} for row in reader]


def fr_path_stats(path: ProbePath) -> dict:
    """Cumulative geodesic path length vs. the endpoint geodesic.

    ratio = L / d_geo >= 1 whenever d_geo > 0.  A stationary or closed path
    (d_geo = 0) reports ratio = NaN with degenerate=True instead of raising,
    so batch sweeps never abort.
    """
    path = path if isinstance(path, ProbePath) else ProbePath(tuple(path), ())
    cps = path.checkpoints
    segments = [fr_distance(a, b) for a, b in zip(cps[:-1], cps[1:])]
    total = float(sum(segments))
    d_geo = fr_distance(cps[0], cps[-1])
    degenerate = d_geo <= 1e-12
    ratio = math.nan if degenerate else total / d_geo
    return {
        "segment_lengths": segments,
        "cumulative_length": total,
        "endpoint_geodesic": d_geo,
        "ratio": ratio,
        "degenerate": degenerate,
    }


def turning_angles(path: ProbePath) -> list:
    """Angle between successive displacement chords in the sqrt-embedding.

    One angle per interior checkpoint, in [0, pi]; a zero-length segment
    contributes angle 0 by convention.
    """
    path = path if isinstance(path, ProbePath) else ProbePath(tuple(path), ())
    cps = path.checkpoints
    if len(cps) < 3:
        raise ValidationError("turning angles need at least 3 checkpoints")
    emb = [np.sqrt(cp.probs) for cp in cps]
    chords = [b - a for a, b in zip(emb[:-1], emb[1:])]
    angles = []
    for u, v in zip(chords[:-1], chords[1:]):
        nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
        if nu <= 1e-15 or nv <= 1e-15:
            angles.append(0.0)
            continue
        cosang = float(np.dot(u, v)) / (nu * nv)
        angles.append(math.acos(min(1.0, max(-1.0, cosang))))
    return angles


# ---------- perturbation landscape ----------

LANDSCAPE_METADATA = (
    "perturbation: q(alpha,beta) = (1-beta) * normalise(p**alpha) + beta * uniform; "
    "alpha = inverse-temperature exponent, beta = uniform mixing weight; "
    "metric fr = geodesic distance to base; metric diag_mi = "
    "sum_k base_k*log(q_k) + log(K) (base-weighted log-score relative to uniform)"
)


def perturb(base, alpha: float, beta: float) -> ProbVector:
    """Two orthogonal decoding perturbations: power-temper then mix toward uniform."""
    base = _as_prob(base)
    if alpha <= 0:
        raise ValidationError("alpha must be positive")
    if not (0.0 <= beta <= 1.0):
        raise ValidationError("beta must lie in [0, 1]")
    powered = np.power(base.probs, alpha)
    total = float(np.sum(powered))
    if total <= 0:
        raise ValidationError("perturbation annihilated all mass")
    tempered = powered / total
    uniform = np.full(base.support_size, 1.0 / base.support_size)
    return ProbVector((1.0 - beta) * tempered + beta * uniform)


def landscape_grid(base, alphas, betas, metric: str = "fr") -> np.ndarray:
    """Metric values over the (alpha, beta) perturbation grid.

    Row i, column j holds the metric at (alphas[i], betas[j]); the (1, 0) cell
    equals the unperturbed metric.  See LANDSCAPE_METADATA for the declared
    parametrisation (emitted alongside any serialised grid).
    """
    base = _as_prob(base)
    alphas = [float(a) for a in alphas]
    betas = [float(b) for b in betas]
    if any(not math.isfinite(a) for a in alphas) or any(not math.isfinite(b) for b in betas):
        raise ValidationError("alphas and betas must be finite")
    if metric not in ("fr", "diag_mi"):
        raise ValidationError(f"unknown landscape metric {metric!r}")
    k = base.support_size
    grid = np.empty((len(alphas), len(betas)))
    for i, a in enumerate(alphas):
        for j, b in enumerate(betas):
            q = perturb(base, a, b)
            if metric == "fr":
                grid[i, j] = fr_distance(base, q)
            else:
                with np.errstate(divide="ignore"):
                    logq = np.log(q.probs)
                mask = base.probs > 0
                grid[i, j] = float(np.sum(base.probs[mask] * logq[mask])) + math.log(k)
    return grid
