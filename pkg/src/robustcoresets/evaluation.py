"""Metrics: Gaussian KL divergences, predictive accuracy, RMSE, and
outlier-rejection statistics, plus the metrics CSV schema."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky

from .builder import CoresetState, expand_state
from .data import Dataset
from .exceptions import DataError, ModelError
from .models.logistic import _log_sigmoid

__all__ = [
    "MetricPoint",
    "gaussian_kl",
    "reverse_kl_vs_clean",
    "predictive_accuracy",
    "rmse",
    "outlier_fraction",
    "write_metrics_csv",
    "read_metrics_csv",
]

_KL_FLOOR = -1e-9

METRIC_KINDS = ("reverse_kl", "accuracy", "rmse", "outlier_fraction",
                "support_size", "group_clean_mass")


@dataclass(frozen=True)
class MetricPoint:
    """One evaluated metric for a (trial, method, contamination rate, size) cell.

    size is the builder iteration count; the support cardinality travels as
    its own metric kind ("support_size") since repeated selections can keep
    the support smaller than the iteration count.
    """

    trial: int
    method: str
    beta: Optional[float]
    rate: float
    size: int
    metric: str
    value: float

    def __post_init__(self):
        if self.metric not in METRIC_KINDS:
            raise DataError(f"unknown metric kind {self.metric!r}")
        if self.metric in ("accuracy", "outlier_fraction", "group_clean_mass"):
            if not -1e-12 <= self.value <= 1.0 + 1e-12:
                raise DataError(f"{self.metric} must lie in [0, 1], got {self.value}")
        if self.metric == "reverse_kl" and self.value < _KL_FLOOR:
            raise DataError(f"reverse_kl below the numerical floor: {self.value}")


def gaussian_kl(p, q) -> float:
    """KL(N(mu_p, S_p) || N(mu_q, S_q)) for SPD covariances.

    Tiny negative round-off (above -1e-9) is clamped to zero; anything
    lower raises.
    """
    mu_p, cov_p = p
    mu_q, cov_q = q
    mu_p = np.asarray(mu_p, dtype=float)
    mu_q = np.asarray(mu_q, dtype=float)
    d = mu_p.shape[0]
    if mu_q.shape[0] != d or cov_p.shape != (d, d) or cov_q.shape != (d, d):
        raise ModelError("dimension mismatch between the two Gaussians")
    try:
        chol_p = cholesky(cov_p, lower=True)
        chol_q = cholesky(cov_q, lower=True)
    except np.linalg.LinAlgError:
        raise ModelError("covariances must be symmetric positive definite") from None
    trace = np.trace(cho_solve((chol_q, True), cov_p))
    diff = mu_q - mu_p
    maha = diff @ cho_solve((chol_q, True), diff)
    log_det = 2.0 * (np.log(np.diag(chol_q)).sum() - np.log(np.diag(chol_p)).sum())
    value = 0.5 * (trace + maha - d + log_det)
    if value < _KL_FLOOR:
        raise ModelError(f"KL evaluated to {value}, below the numerical floor")
    return max(float(value), 0.0)


def reverse_kl_vs_clean(state: CoresetState, model, ds: Dataset) -> float:
    """KL of the coreset conjugate posterior against the cleansed-data posterior.

    The reference is the unit-weight conjugate posterior on the rows whose
    outlier mask is False.
    """
    if ds.outlier_mask is None:
        raise DataError("reverse_kl_vs_clean requires an outlier mask")
    idx, w = expand_state(state, ds)
    coreset_post = model.weighted_posterior(ds, idx, w)
    clean = np.flatnonzero(~ds.outlier_mask)
    clean_post = model.weighted_posterior(ds, clean, np.ones(len(clean)))
    return gaussian_kl(coreset_post, clean_post)


def predictive_accuracy(samples, test: Dataset) -> float:
    """Fraction of test labels recovered by the max mean log-likelihood rule.

    For each point the label maximizing (1/S) sum_s log pi(y | x, theta_s)
    under the logistic model (inputs embedded as [x; 1]) is predicted; exact
    ties go to +1.
    """
    if test.labels is None or not test.has_binary_labels():
        raise DataError("predictive_accuracy requires binary {-1,+1} labels")
    samples = np.atleast_2d(samples)
    z = np.hstack([test.features, np.ones((test.n, 1))])
    if samples.shape[1] != z.shape[1]:
        raise ModelError("sample dimension must equal feature dimension + 1")
    logits = samples @ z.T
    mean_pos = _log_sigmoid(logits).mean(axis=0)
    mean_neg = _log_sigmoid(-logits).mean(axis=0)
    predicted = np.where(mean_pos >= mean_neg, 1.0, -1.0)
    return float(np.mean(predicted == test.labels))


def rmse(model, posterior, test: Dataset) -> float:
    """Root mean squared error of the predictive posterior means."""
    if test.labels is None:
        raise DataError("rmse requires regression labels")
    means, _ = model.predictive(posterior, test.features)
    return float(np.sqrt(np.mean((test.labels - means) ** 2)))


def outlier_fraction(state: CoresetState, ds: Dataset) -> float:
    """Weight mass sitting on masked rows divided by the total weight mass."""
    if ds.outlier_mask is None:
        raise DataError("outlier_fraction requires an outlier mask")
    idx, w = expand_state(state, ds)
    total = w.sum()
    if total <= 0.0:
        return 0.0
    return float(w[ds.outlier_mask[idx]].sum() / total)


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(path, points: Sequence[MetricPoint]):
    """Serialize metric points as (trial, method, beta, F, size, metric, value)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial", "method", "beta", "F", "size", "metric", "value"])
        for p in points:
            writer.writerow([p.trial, p.method, _format(p.beta), repr(float(p.rate)),
                             p.size, p.metric, repr(float(p.value))])


def read_metrics_csv(path) -> list[MetricPoint]:
    points = []
    with open(path, "r", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            points.append(MetricPoint(
                trial=int(row["trial"]),
                method=row["method"],
                beta=float(row["beta"]) if row["beta"] else None,
                rate=float(row["F"]),
                size=int(row["size"]),
                metric=row["metric"],
                value=float(row["value"]),
            ))
    return points
