"""Scoring of estimated individualized effects against ground truth.

All functions are pure and stateless.  Sign-based misclassification excludes
individuals whose true effect is exactly zero (their sign is undefined); the
calibration statistic groups individuals into deciles of the point estimate
and sums variance-normalized squared calibration gaps.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class ReplicationResult:
    """Per-replication metric bundle for one (estimator, variant) pair."""

    family: str
    dgp_index: int
    estimator: str
    hyper_variant: str
    bias: float
    rmse: float
    misclass: float
    hl: float
    coverage: float
    null_flag_prop: float
    censor_rate: float
    n: int
    rep_index: int
    seed: int

    def as_dict(self) -> dict:
        return asdict(self)


def bias_rmse(theta_hat: np.ndarray, theta_true: np.ndarray) -> tuple[float, float]:
    theta_hat = np.asarray(theta_hat, dtype=float)
    theta_true = np.asarray(theta_true, dtype=float)
    if theta_hat.size == 0:
        raise MetricError("empty input")
    if theta_hat.shape != theta_true.shape or not (
        np.isfinite(theta_hat).all() and np.isfinite(theta_true).all()
    ):
        raise MetricError("inputs must be finite and of equal length")
    err = theta_hat - theta_true
    return float(err.mean()), float(np.sqrt((err**2).mean()))


def misclass_bart(theta_draws: np.ndarray, theta_true: np.ndarray) -> float:
    """Sign misclassification from posterior draws (n x S matrix).

    Individual i is misclassified when the posterior probability of the
    opposite sign exceeds 0.5; exact-zero truths are excluded.
    """
    theta_draws = np.asarray(theta_draws, dtype=float)
    theta_true = np.asarray(theta_true, dtype=float)
    if theta_draws.shape[1] < 100:
        raise MetricError("need at least 100 posterior draws")
    keep = theta_true != 0.0
    if not keep.any():
        raise MetricError("sign undefined: all true effects are zero")
    p_neg = (theta_draws[keep] < 0.0).mean(axis=1)
    p_pos = (theta_draws[keep] > 0.0).mean(axis=1)
    truth = theta_true[keep]
    wrong = np.where(truth > 0.0, p_neg > 0.5, p_pos > 0.5)
    return float(wrong.mean())


def misclass_csf(theta_hat: np.ndarray, theta_true: np.ndarray) -> float:
    """Proportion of point estimates whose sign differs from the truth."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    theta_true = np.asarray(theta_true, dtype=float)
    keep = theta_true != 0.0
    if not keep.any():
        raise MetricError("sign undefined: all true effects are zero")
    return float((np.sign(theta_hat[keep]) != np.sign(theta_true[keep])).mean())


def hosmer_lemeshow(theta_hat: np.ndarray, theta_true: np.ndarray,
                    groups: int = 10) -> float:
    """Decile-grouped calibration discrepancy; larger is worse, 0 is perfect."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    theta_true = np.asarray(theta_true, dtype=float)
    n = theta_hat.size
    if n < 50:
        raise MetricError("need at least 50 individuals")
    n_distinct = np.unique(theta_hat).size
    g = min(groups, n_distinct)
    if g < 2:
        raise MetricError("need at least 2 distinct point estimates")
    edges = np.quantile(theta_hat, np.arange(1, g) / g)
    # value equal to an edge joins the lower decile
    group = np.searchsorted(edges, theta_hat, side="left")
    stat = 0.0
    for k in range(g):
        mask = group == k
        n_g = int(mask.sum())
        if n_g == 0:
            continue
        gap = theta_hat[mask].mean() - theta_true[mask].mean()
        v_g = max((theta_hat[mask] - theta_true[mask]).var(ddof=1) if n_g > 1 else 0.0,
                  1e-6)
        stat += n_g * gap**2 / v_g
    return float(stat)


def coverage(intervals: np.ndarray, theta_true: np.ndarray) -> float:
    """Fraction of closed intervals [lo, hi] containing the true value."""
    intervals = np.asarray(intervals, dtype=float)
    theta_true = np.asarray(theta_true, dtype=float)
    lo, hi = intervals[:, 0], intervals[:, 1]
    if (lo > hi).any():
        raise MetricError("interval with lo > hi")
    return float(((lo <= theta_true) & (theta_true <= hi)).mean())


def null_flags_csf(theta_hat: np.ndarray, ci: np.ndarray) -> float:
    """Proportion of confidence intervals that exclude the mean estimate."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    ci = np.asarray(ci, dtype=float)
    mean = theta_hat.mean()
    flagged = (mean < ci[:, 0]) | (mean > ci[:, 1])
    return float(flagged.mean())
