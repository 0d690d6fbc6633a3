"""Treatment-assignment probability estimation and covariate balance.

Three learners (logistic regression, logistic regression on a natural cubic
spline expansion, and a probability forest) are blended with simplex weights
chosen by grid search to minimize the largest inverse-probability-weighted
standardized mean difference across covariates.  The blended estimate is
clamped to [0.01, 0.99] and appended to the covariate matrix.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .forests import ProbabilityForest

CLAMP_LO, CLAMP_HI = 0.01, 0.99
_RIDGE = 1e-4


class PropensityError(ValueError):
    pass


@dataclass
class PropensityFit:
    learner_probs: np.ndarray        # 3 x n per-learner P(A=1|x)
    weights: np.ndarray              # simplex blend weights
    ehat: np.ndarray                 # clamped combined probabilities
    smd_report: list[dict]           # per-covariate balance summary
    ridge_fallback: bool = False     # any learner hit the separation fallback


def _irls(Z, A, ridge=0.0):
    """Logistic maximum likelihood via iteratively reweighted least squares."""
    n, q = Z.shape
    beta = np.zeros(q)
    for _ in range(100):
        eta = Z @ beta
        p = expit(eta)
        w = np.maximum(p * (1.0 - p), 1e-10)
        H = (Z * w[:, None]).T @ Z
        if ridge > 0.0:
            H = H + ridge * np.eye(q)
        grad = Z.T @ (A - p) - ridge * beta
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            return beta, False
        beta = beta + step
        if not np.isfinite(beta).all():
            return beta, False
        if np.abs(step).max() < 1e-8:
            return beta, True
    return beta, False


def _fit_logistic_design(Z, A):
    """Fit on a prepared design; falls back to a small ridge on separation."""
    beta, converged = _irls(Z, A)
    fallback = False
    if not converged or np.abs(beta).max() > 30.0:
        beta, _ = _irls(Z, A, ridge=_RIDGE)
        fallback = True
    return expit(Z @ beta), fallback


def _check_inputs(X, A):
    X = np.asarray(X, dtype=float)
    A = np.asarray(A, dtype=float)
    if A.min() == A.max():
        raise PropensityError("degenerate treatment: all assignments equal")
    if X.shape[0] < X.shape[1] + 1:
        raise PropensityError("need n >= p + 1")
    return X, A


def fit_logistic(X, A):
    """Plain logistic regression probabilities; returns (probs, fallback_flag)."""
    X, A = _check_inputs(X, A)
    Z = np.column_stack([np.ones(len(A)), X])
    return _fit_logistic_design(Z, A)


def natural_spline_basis(x: np.ndarray, n_interior: int = 4) -> np.ndarray:
    """Natural cubic spline basis columns for one continuous covariate.

    Interior knots at quintiles, boundary knots at the extremes; linear
    beyond the boundaries.  Returns the linear column plus K-2 curvature
    columns; degenerate covariates fall back to the identity column.
    """
    x = np.asarray(x, dtype=float)
    probs = np.arange(1, n_interior + 1) / (n_interior + 1)
    knots = np.concatenate([[x.min()], np.quantile(x, probs), [x.max()]])
    knots = np.unique(knots)
    K = knots.size
    if K < 3:
        return x[:, None]

    def d(k):
        num = np.maximum(x - knots[k], 0.0) ** 3 - np.maximum(x - knots[-1], 0.0) ** 3
        return num / (knots[-1] - knots[k])

    d_last = d(K - 2)
    cols = [x] + [d(k) - d_last for k in range(K - 2)]
    return np.column_stack(cols)


def _is_binary(col: np.ndarray) -> bool:
    return np.unique(col).size <= 2


def fit_spline_logistic(X, A):
    """Logistic fit on a natural-spline expansion of the continuous columns."""
    X, A = _check_inputs(X, A)
    blocks = [np.ones((len(A), 1))]
    for j in range(X.shape[1]):
        col = X[:, j]
        blocks.append(col[:, None] if _is_binary(col) else natural_spline_basis(col))
    return _fit_logistic_design(np.hstack(blocks), A)


def fit_probability_forest(X, A, seed):
    """Out-of-bag class probabilities from a classification forest."""
    X, A = _check_inputs(X, A)
    forest = ProbabilityForest(num_trees=200, subsample=0.5, min_leaf=10,
                               seed=seed)
    forest.fit(X, A)
    return forest.predict_oob(X)


def _weighted_moments(x, w):
    sw = w.sum()
    mu = (w * x).sum() / sw
    var = (w * (x - mu) ** 2).sum() / sw
    return mu, var


def standardized_mean_difference(x, A, weights=None) -> float:
    """SMD_j = (mu1 - mu0) / s_pooled with weighted means and variances."""
    w = np.ones_like(x) if weights is None else weights
    treated, control = A == 1, A == 0
    mu1, v1 = _weighted_moments(x[treated], w[treated])
    mu0, v0 = _weighted_moments(x[control], w[control])
    pooled = np.sqrt(0.5 * (v1 + v0))
    if pooled == 0.0:
        return 0.0
    return (mu1 - mu0) / pooled


def _ipw(A, ehat):
    return A / ehat + (1.0 - A) / (1.0 - ehat)


def max_abs_smd(X, A, ehat) -> float:
    w = _ipw(A, ehat)
    return max(
        abs(standardized_mean_difference(X[:, j], A, w)) for j in range(X.shape[1])
    )


def _simplex_grid(step=0.05):
    m = int(round(1.0 / step))
    for i in range(m + 1):
        for j in range(m - i + 1):
            yield np.array([i, j, m - i - j]) / m


def solve_ensemble_weights(learner_probs, X, A) -> np.ndarray:
    """Grid search over the 3-simplex (step 0.05) minimizing max |weighted SMD|.

    Ties (within 1e-10) are broken toward the most uniform weight vector.
    """
    learner_probs = np.asarray(learner_probs, dtype=float)
    A = np.asarray(A, dtype=float)
    best_w, best_obj, best_spread = None, np.inf, np.inf
    for w in _simplex_grid():
        ehat = np.clip(w @ learner_probs, CLAMP_LO, CLAMP_HI)
        obj = max_abs_smd(X, A, ehat)
        spread = ((w - 1.0 / 3.0) ** 2).sum()
        if obj < best_obj - 1e-10 or (
            abs(obj - best_obj) <= 1e-10 and spread < best_spread
        ):
            best_w, best_obj, best_spread = w, obj, spread
    return best_w


def augment(X, ehat) -> np.ndarray:
    """Covariate matrix with the estimated propensity appended as a column."""
    X = np.asarray(X, dtype=float)
    ehat = np.asarray(ehat, dtype=float)
    if X.shape[0] != ehat.shape[0]:
        raise PropensityError("length mismatch")
    return np.column_stack([X, ehat])


def fit_propensity(X, A, seed) -> PropensityFit:
    """Three-learner balance-weighted ensemble estimate of P(A=1|x)."""
    X, A = _check_inputs(X, A)
    p_glm, flag1 = fit_logistic(X, A)
    p_gam, flag2 = fit_spline_logistic(X, A)
    p_rf = fit_probability_forest(X, A, seed)
    learner_probs = np.vstack([p_glm, p_gam, p_rf])
    weights = solve_ensemble_weights(learner_probs, X, A)
    ehat = np.clip(weights @ learner_probs, CLAMP_LO, CLAMP_HI)
    w_ipw = _ipw(A, ehat)
    report = []
    for j in range(X.shape[1]):
        report.append(
            {
                "covariate": f"x{j + 1}",
                "unweighted_smd": standardized_mean_difference(X[:, j], A),
                "weighted_smd": standardized_mean_difference(X[:, j], A, w_ipw),
            }
        )
    return PropensityFit(
        learner_probs=learner_probs,
        weights=weights,
        ehat=ehat,
        smd_report=report,
        ridge_fallback=flag1 or flag2,
    )


def export_smd_csv(fit: PropensityFit, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["covariate", "unweighted_smd", "weighted_smd"]
        )
        writer.writeheader()
        for row in fit.smd_report:
            writer.writerow(row)
