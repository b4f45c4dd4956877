"""Threshold-sweep detection metrics and the global Mahalanobis baseline.

The sweep produces three curves over normalized scores: detection rate
against false-alarm rate, detection rate against threshold, and false-alarm
rate against threshold.  Trapezoidal areas under the three curves combine
into the usual derived summaries (target detectability, background
suppression, overall probability).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NumericalError, ValidationError
from .raster import CODE_ANOMALY, CODE_IGNORE, AnomalyMap, LabelMask, Raster

RIDGE_SCALE = 1e-6


@dataclass
class RocCurves:
    """Sweep curves: each row is (abscissa, ordinate), abscissa non-decreasing."""

    roc: np.ndarray          # (false-alarm rate, detection rate), threshold descending
    detection: np.ndarray    # (threshold, detection rate)
    false_alarm: np.ndarray  # (threshold, false-alarm rate)
    thresholds: np.ndarray


@dataclass
class MetricsReport:
    auc_df: float
    auc_dtau: float
    auc_ftau: float
    auc_td: float
    auc_bs: float
    auc_odp: float
    positives: int
    negatives: int
    thresholds: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def anomaly_truth(mask: LabelMask) -> np.ndarray:
    """Collapse label codes to binary truth: anomaly 1, ignore 255, rest 0."""
    codes = mask.codes
    truth = np.zeros(codes.shape, dtype=np.uint8)
    truth[codes == CODE_ANOMALY] = 1
    truth[codes == CODE_IGNORE] = 255
    return truth


def _split_scores(scores: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth).ravel()
    if scores.shape != truth.shape:
        raise ValidationError(f"scores {scores.shape} and truth {truth.shape} differ")
    if not np.all(np.isfinite(scores)):
        raise ValidationError("scores must be finite")
    if not np.isin(truth, (0, 1, 255)).all():
        raise ValidationError("truth values must be 0, 1 or 255")
    keep = truth != 255
    scores, truth = scores[keep], truth[keep]
    pos = scores[truth == 1]
    neg = scores[truth == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValidationError("need at least one positive and one negative pixel")
    return pos, neg


def _normalize(pos: np.ndarray, neg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo = min(pos.min(), neg.min())
    hi = max(pos.max(), neg.max())
    if hi > lo:
        return (pos - lo) / (hi - lo), (neg - lo) / (hi - lo)
    return np.zeros_like(pos), np.zeros_like(neg)


def _rate_ge(sorted_vals: np.ndarray, taus: np.ndarray) -> np.ndarray:
    # fraction of values >= tau, vectorized over the threshold grid
    idx = np.searchsorted(sorted_vals, taus, side="left")
    return (sorted_vals.size - idx) / sorted_vals.size


def _staircase(taus: np.ndarray, rates: np.ndarray) -> np.ndarray:
    """Emit both corners of each step so a trapezoid integrates it exactly.

    The rate of ``value >= tau`` is constant on each half-open interval
    between consecutive grid points, so the curve through
    (t[j-1], r[j]), (t[j], r[j]) reproduces the step function.
    """
    m = taus.size
    pts = np.empty((2 * m - 1, 2), dtype=np.float64)
    pts[0] = (taus[0], rates[0])
    pts[1::2, 0] = taus[:-1]
    pts[1::2, 1] = rates[1:]
    pts[2::2, 0] = taus[1:]
    pts[2::2, 1] = rates[1:]
    return pts


def roc_3d(scores: np.ndarray, truth: np.ndarray, tau_grid="unique") -> RocCurves:
    """Sweep thresholds over normalized scores and build the three curves.

    ``tau_grid`` is ``"unique"`` (default: every distinct score value plus
    the endpoints 0 and 1, making the threshold curves exact step
    functions) or an integer anchor count for a fixed uniform sweep.
    """
    pos, neg = _split_scores(scores, truth)
    pos, neg = _normalize(pos, neg)
    if tau_grid == "unique":
        taus = np.unique(np.concatenate([pos, neg, [0.0, 1.0]]))
        exact = True
    elif isinstance(tau_grid, int) and tau_grid >= 2:
        taus = np.linspace(0.0, 1.0, tau_grid)
        exact = False
    else:
        raise ValidationError(f"tau_grid must be 'unique' or an int >= 2, got {tau_grid!r}")

    spos = np.sort(pos)
    sneg = np.sort(neg)
    pd = _rate_ge(spos, taus)
    pf = _rate_ge(sneg, taus)

    # threshold descending, prepended origin; ties collapse into shared jumps
    roc = np.concatenate([[[0.0, 0.0]], np.stack([pf[::-1], pd[::-1]], axis=1)])
    if exact:
        detection = _staircase(taus, pd)
        false_alarm = _staircase(taus, pf)
    else:
        detection = np.stack([taus, pd], axis=1)
        false_alarm = np.stack([taus, pf], axis=1)
    return RocCurves(roc=roc, detection=detection, false_alarm=false_alarm, thresholds=taus)


def auc(curve: np.ndarray) -> float:
    """Trapezoidal area under an (n, 2) curve sorted by abscissa."""
    curve = np.asarray(curve, dtype=np.float64)
    if curve.ndim != 2 or curve.shape[1] != 2 or curve.shape[0] < 2:
        raise ValidationError(f"curve must be (n>=2, 2), got {curve.shape}")
    x = curve[:, 0]
    if np.any(np.diff(x) < 0):
        raise ValidationError("curve abscissa must be non-decreasing")
    return float(np.trapezoid(curve[:, 1], x))


def derived_areas(auc_df: float, auc_dtau: float, auc_ftau: float) -> tuple[float, float, float]:
    """Combine the three base areas into (td, bs, odp) summaries."""
    return auc_df + auc_dtau, auc_df - auc_ftau, auc_df + auc_dtau - auc_ftau


def report(scores: np.ndarray, truth: np.ndarray, tau_grid="unique") -> MetricsReport:
    """Run the sweep and summarize all six areas in one report."""
    pos, neg = _split_scores(scores, truth)
    curves = roc_3d(scores, truth, tau_grid=tau_grid)
    auc_df = auc(curves.roc)
    auc_dtau = auc(curves.detection)
    auc_ftau = auc(curves.false_alarm)
    td, bs, odp = derived_areas(auc_df, auc_dtau, auc_ftau)
    return MetricsReport(
        auc_df=auc_df,
        auc_dtau=auc_dtau,
        auc_ftau=auc_ftau,
        auc_td=td,
        auc_bs=bs,
        auc_odp=odp,
        positives=int(pos.size),
        negatives=int(neg.size),
        thresholds=int(curves.thresholds.size),
    )


def mahalanobis_scores(raster: Raster) -> np.ndarray:
    """Raw squared Mahalanobis distance of every pixel from the global mean.

    The covariance is the maximum-likelihood estimate over all pixels with
    a relative ridge of ``1e-6 * trace / bands`` on the diagonal.
    """
    b = raster.bands
    n = raster.height * raster.width
    if n <= b:
        raise ValidationError(f"need more pixels ({n}) than bands ({b})")
    x = raster.values.reshape(b, n).astype(np.float64)
    mu = x.mean(axis=1)
    z = x - mu[:, None]
    cov = (z @ z.T) / n
    cov[np.diag_indices(b)] += RIDGE_SCALE * np.trace(cov) / b
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"covariance is not positive definite: {exc}") from exc
    y = solve_triangular(chol, z, lower=True)
    scores = np.einsum("ij,ij->j", y, y)
    return scores.reshape(raster.height, raster.width)


def grx(raster: Raster) -> AnomalyMap:
    """Global Mahalanobis anomaly map, min-max normalized to [0, 1]."""
    raw = mahalanobis_scores(raster)
    lo, hi = float(raw.min()), float(raw.max())
    if hi > lo:
        norm = (raw - lo) / (hi - lo)
    else:
        norm = np.zeros_like(raw)
    return AnomalyMap(norm.astype(np.float32))
