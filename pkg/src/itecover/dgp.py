"""Data-generating processes with known individualized treatment effects.

Three simulation families are provided, each with four DGPs:

* ``henderson`` -- a fixed accelerated-failure-time regression surface with
  fresh mean-zero residuals each replication (Gaussian / Gumbel /
  standardized-Gamma / t-mixture), uniform censoring.
* ``cui`` -- correlated uniform covariates with AFT, Cox, and Poisson
  outcome models, covariate-dependent censoring, administrative caps.
* ``hu`` -- Weibull proportional-hazards outcomes with a logistic
  treatment-assignment model and exponential censoring.

Every family exposes the true effect on the log-time scale,
``theta(x) = E[log T(1) | x] - E[log T(0) | x]``, either in closed form or
through a truncated-Poisson series, plus an independent Monte-Carlo oracle.
Null variants replace the heterogeneous effect by a frozen constant while
leaving covariates, treatment assignment, and censoring untouched.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.random import SeedSequence, default_rng
from scipy.special import expit, gammaln

FAMILIES = ("henderson", "cui", "hu")
RESIDUAL_LAWS = ("gaussian", "gumbel", "std_gamma", "t_mixture")

EULER_GAMMA = 0.5772156649015329

# Administrative caps ("maximum follow-up") per Cui DGP, applied as censoring.
CUI_CAPS = {1: 1.5, 2: 2.0, 3: 15.0, 4: 3.0}

# Hu Weibull shape and treatment-group scale parameters.  The scale d_a
# enters as a multiplier of the exponential draw; with d0=1200, d1=2000 and
# an Exp(0.007) censoring time this induces roughly 20% censoring.
HU_ETA = 2.0
HU_D0 = 1200.0
HU_D1 = 2000.0
HU_CENSOR_RATE = 0.007

# Henderson surrogate AFT surface: intercept calibrated once so that the
# Gaussian-residual censoring fraction lands near 15% (band 10-25%).
HENDERSON_C0 = 1.05
# Covariates, treatment, and regression-surface values are frozen across
# replications; only the residuals and censoring times are redrawn.
_HENDERSON_FRAME_SEED = 0x48454E44  # fixed stream id for the frozen frame

# Population-mean treatment effects used by the null-HTE variants.
# Generated by scripts/freeze_null_constants.py (v1); do not edit by hand.
NULL_CONSTANTS_VERSION = 1
NULL_EFFECT_CONSTANTS: dict[tuple[str, int], float] = {
    ("henderson", 1): 0.399798,
    ("henderson", 2): 0.399798,
    ("henderson", 3): 0.399798,
    ("henderson", 4): 0.399798,
    ("cui", 1): 0.178247,
    ("cui", 2): -0.365955,
    ("cui", 3): 0.099107,
    ("cui", 4): 0.080852,
    ("hu", 1): 0.311320,
    ("hu", 2): 0.442863,
    ("hu", 3): -0.001322,
    ("hu", 4): 0.042631,
}


class DgpError(ValueError):
    """Invalid DGP specification or non-finite intermediate value."""


@dataclass(frozen=True)
class DgpSpec:
    """Full recipe for one simulated dataset."""

    family: str
    dgp_index: int
    n: int
    seed: int
    null_hte: bool = False
    residual_law: str | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DgpError(f"unknown family {self.family!r}")
        if self.dgp_index not in (1, 2, 3, 4):
            raise DgpError(f"dgp_index must be in 1..4, got {self.dgp_index}")
        if self.n < 1:
            raise DgpError("n must be positive")
        if self.family == "henderson":
            law = self.residual_law or RESIDUAL_LAWS[self.dgp_index - 1]
            if law not in RESIDUAL_LAWS:
                raise DgpError(f"unknown residual law {law!r}")
            object.__setattr__(self, "residual_law", law)
        elif self.residual_law is not None:
            raise DgpError("residual_law only applies to the henderson family")

    @property
    def p(self) -> int:
        return {"henderson": 10, "cui": 15, "hu": 10}[self.family]

    @property
    def cap(self) -> float:
        return CUI_CAPS[self.dgp_index] if self.family == "cui" else np.inf


@dataclass
class SurvivalDataset:
    """Observed right-censored data plus the scoring ground truth."""

    X: np.ndarray          # n x p covariates
    A: np.ndarray          # n binary treatment
    Y: np.ndarray          # n follow-up times
    delta: np.ndarray      # n event indicators
    theta_true: np.ndarray # n log-time ITEs
    e_true: np.ndarray     # n assignment probabilities
    T_latent: np.ndarray   # n uncensored event times (diagnostics only)

    @property
    def n(self) -> int:
        return len(self.Y)

    @property
    def censor_rate(self) -> float:
        return float(1.0 - self.delta.mean())


@dataclass(frozen=True)
class ResidualSampler:
    """Mean-zero residual law for the henderson family."""

    law: str

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.law == "gaussian":
            return rng.standard_normal(size)
        if self.law == "gumbel":
            # location -gamma, scale 1 => mean zero
            return rng.gumbel(loc=-EULER_GAMMA, scale=1.0, size=size)
        if self.law == "std_gamma":
            return rng.gamma(shape=2.0, scale=1.0, size=size) - 2.0
        if self.law == "t_mixture":
            # equal-weight t_3 components at locations (-2, 0, 2),
            # standardized to unit variance (var = 8/3 + 3) so the censoring
            # rate stays comparable across residual laws
            locs = rng.choice(np.array([-2.0, 0.0, 2.0]), size=size)
            return (locs + rng.standard_t(3.0, size=size)) / np.sqrt(17.0 / 3.0)
        raise DgpError(f"unknown residual law {self.law!r}")


def _rng(seed, *stream) -> np.random.Generator:
    return default_rng(SeedSequence([int(seed) & (2**64 - 1), *stream]))


# ---------------------------------------------------------------------------
# covariates


def gen_cui_covariates(n: int, seed: int) -> np.ndarray:
    """Correlated uniforms X = L U with V_ij = 0.5^|i-j| = L L'."""
    if n < 1:
        raise DgpError("n must be positive")
    idx = np.arange(15)
    V = 0.5 ** np.abs(idx[:, None] - idx[None, :])
    L = np.linalg.cholesky(V)
    U = _rng(seed, 1).uniform(size=(n, 15))
    return U @ L.T


def gen_hu_covariates(n: int, seed: int) -> np.ndarray:
    """Five Normal(0, 0.35^2) columns followed by five Bernoulli(0.5)."""
    if n < 1:
        raise DgpError("n must be positive")
    rng = _rng(seed, 1)
    cont = rng.normal(0.0, 0.35, size=(n, 5))
    binary = (rng.uniform(size=(n, 5)) < 0.5).astype(float)
    return np.hstack([cont, binary])


def _gen_covariates(spec: DgpSpec, seed: int) -> np.ndarray:
    if spec.family == "cui":
        return gen_cui_covariates(spec.n, seed)
    # henderson uses the same 10-column block as hu
    return gen_hu_covariates(spec.n, seed)


# ---------------------------------------------------------------------------
# propensity


def _beta24_pdf(x: np.ndarray) -> np.ndarray:
    """Beta(2,4) density, zero outside (0,1)."""
    x = np.asarray(x, dtype=float)
    inside = (x > 0.0) & (x < 1.0)
    out = np.zeros_like(x)
    xs = np.where(inside, x, 0.5)
    out[inside] = (20.0 * xs * (1.0 - xs) ** 3)[inside]
    return out


def propensity_true(spec: DgpSpec, x: np.ndarray) -> np.ndarray:
    """True treatment-assignment probability e(X) for one row or a matrix."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != spec.p:
        raise DgpError(
            f"expected {spec.p} covariates for family {spec.family}, got {X.shape[1]}"
        )
    if spec.family == "cui":
        if spec.dgp_index == 1 or spec.dgp_index == 3:
            e = (1.0 + _beta24_pdf(X[:, 0])) / 4.0
        elif spec.dgp_index == 2:
            e = (1.0 + _beta24_pdf(X[:, 1])) / 4.0
        else:
            e = expit(X[:, 0]) * expit(X[:, 1])
    elif spec.family == "hu":
        index = (
            0.3
            - 0.25 * X[:, 0]
            - 2.25 * X[:, 1]
            - 0.75 * X[:, 2]
            - 0.25 * X[:, 4]
            - 0.25 * X[:, 5]
            - 0.50 * X[:, 6]
            - 1.0 * X[:, 8]
            + 1.25 * X[:, 9]
        )
        e = expit(index)
    else:  # henderson surrogate
        e = expit(0.2 + 0.5 * X[:, 0] - 0.4 * X[:, 5])
    e = np.clip(e, 0.005, 0.995)
    return e[0] if single else e


# ---------------------------------------------------------------------------
# regression surfaces and effect functions


def _henderson_m0(X: np.ndarray) -> np.ndarray:
    return HENDERSON_C0 + 0.3 * X[:, 0] - 0.2 * X[:, 1] + 0.3 * X[:, 0] * X[:, 5]


def _henderson_effect(X: np.ndarray) -> np.ndarray:
    return 0.25 - 0.2 * X[:, 0] + 0.3 * X[:, 6]


def _cui1_baseline(X: np.ndarray) -> np.ndarray:
    return (
        -1.85
        - 0.8 * (X[:, 0] < 0.5)
        + 0.7 * np.sqrt(X[:, 1])
        + 0.2 * X[:, 2]
    )


def _cui1_effect(X: np.ndarray) -> np.ndarray:
    return 0.7 - 0.4 * (X[:, 0] < 0.5) - 0.4 * np.sqrt(X[:, 1])


def _cui2_f(X: np.ndarray, a) -> np.ndarray:
    return X[:, 0] + (-0.5 + X[:, 1]) * a


def _cui_poisson_mean(spec: DgpSpec, X: np.ndarray, a) -> np.ndarray:
    if spec.dgp_index == 3:
        return X[:, 1] ** 2 + X[:, 2] + 6.0 + 2.0 * (np.sqrt(X[:, 0]) - 0.3) * a
    return X[:, 1] + X[:, 2] + np.maximum(0.0, X[:, 0] - 0.3) * a


def _hu_f(spec: DgpSpec, X: np.ndarray, a: int) -> np.ndarray:
    x1, x2, x3, x4, x5 = (X[:, j] for j in range(5))
    x6, x7 = X[:, 5], X[:, 6]
    d = spec.dgp_index
    if a == 1:
        if d in (1, 2):
            return (
                -0.2 + 0.1 * expit(x1) - 0.8 * np.sin(x3) - 0.1 * x5**2
                - 0.3 * x6 - 0.2 * x7
            )
        f = (
            0.5 - 0.1 * expit(x2) + 0.1 * np.sin(x3) - 0.1 * x4**2 + 0.2 * x4
            - 0.1 * x5**2
        )
        if d == 3:
            return f + 0.2 * expit(x5) + 0.2 * x6 - 0.3 * x7
        return f - 0.3 * x6
    if d == 1:
        return 0.2 - 0.5 * x1 - 0.8 * x3 - 1.8 * x5 - 0.9 * x6 - 0.1 * x7
    if d in (2, 3):
        return -0.1 + 0.1 * x1**2 - 0.2 * np.sin(x3) + 0.2 * expit(x5) + 0.2 * x6 - 0.3 * x7
    return -0.2 + 0.5 * np.sin(np.pi * x1 * x3) + 0.2 * expit(x5) + 0.2 * x6 - 0.3 * x7


def _hu_log_time_mean(spec: DgpSpec, X: np.ndarray, a: int) -> np.ndarray:
    # log T(a) = (log E + log d_a - f_a) / eta with E ~ Exp(1)
    d = HU_D1 if a == 1 else HU_D0
    return (np.log(d) - _hu_f(spec, X, a) - EULER_GAMMA) / HU_ETA


def _trunc_poisson_log_mean(mu: np.ndarray) -> np.ndarray:
    """E[log T] for T ~ Poisson(mu) conditioned on T >= 1 (series, exact)."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    kmax = int(np.ceil(mu.max() + 12.0 * np.sqrt(mu.max() + 1.0) + 20.0))
    k = np.arange(1, kmax + 1, dtype=float)
    logpmf = k[:, None] * np.log(mu[None, :]) - mu[None, :] - gammaln(k + 1.0)[:, None]
    w = np.exp(logpmf)
    return (np.log(k) @ w) / (1.0 - np.exp(-mu))


def theta_true(spec: DgpSpec, X: np.ndarray) -> np.ndarray:
    """True log-time ITE for each row of X."""
    X = np.asarray(X, dtype=float)
    if spec.null_hte:
        return np.full(X.shape[0], null_effect_constant(spec))
    if spec.family == "henderson":
        return _henderson_effect(X)
    if spec.family == "hu":
        return _hu_log_time_mean(spec, X, 1) - _hu_log_time_mean(spec, X, 0)
    if spec.dgp_index == 1:
        return _cui1_effect(X)
    if spec.dgp_index == 2:
        # theta = -2 (f(1) - f(0)); the E[log Exp(1)] terms cancel
        return 1.0 - 2.0 * X[:, 1]
    mu1 = _cui_poisson_mean(spec, X, 1.0)
    mu0 = _cui_poisson_mean(spec, X, 0.0)
    return _trunc_poisson_log_mean(mu1) - _trunc_poisson_log_mean(mu0)


def null_effect_constant(spec: DgpSpec) -> float:
    """Frozen population-mean effect used by the null-HTE variant."""
    return NULL_EFFECT_CONSTANTS[(spec.family, spec.dgp_index)]


def make_null_variant(spec: DgpSpec) -> DgpSpec:
    """Constant-effect version of a spec; everything else unchanged."""
    return replace(spec, null_hte=True)


# ---------------------------------------------------------------------------
# survival and censoring times


def _zero_truncated_poisson(rng: np.random.Generator, mu: np.ndarray) -> np.ndarray:
    """Poisson draws resampled until >= 1 (log-time needs T > 0)."""
    out = rng.poisson(mu)
    bad = out == 0
    while bad.any():
        out[bad] = rng.poisson(mu[bad])
        bad = out == 0
    return out.astype(float)


def _sample_t_given_arm(spec: DgpSpec, X: np.ndarray, a, rng: np.random.Generator,
                        W: np.ndarray | None = None) -> np.ndarray:
    """Counterfactual event times T(a); `a` is a scalar or an n-vector."""
    n = X.shape[0]
    a = np.broadcast_to(np.asarray(a, dtype=float), (n,))
    if spec.family == "henderson":
        if W is None:
            W = ResidualSampler(spec.residual_law).sample(rng, n)
        m0 = _henderson_m0(X)
        m1 = m0 + _henderson_effect(X)
        return np.exp(a * m1 + (1.0 - a) * m0 + W)
    if spec.family == "hu":
        E = rng.exponential(size=n)
        d = np.where(a == 1.0, HU_D1, HU_D0)
        f = np.where(a == 1.0, _hu_f(spec, X, 1), _hu_f(spec, X, 0))
        return (d * E * np.exp(-f)) ** (1.0 / HU_ETA)
    if spec.dgp_index == 1:
        return np.exp(_cui1_baseline(X) + _cui1_effect(X) * a + rng.standard_normal(n))
    if spec.dgp_index == 2:
        # hazard 0.5 t^{-1/2} e^f => cumulative hazard t^{1/2} e^f
        E = rng.exponential(size=n)
        return (E * np.exp(-_cui2_f(X, a))) ** 2
    return _zero_truncated_poisson(rng, _cui_poisson_mean(spec, X, a))


def sample_survival_times(spec: DgpSpec, X: np.ndarray, A: np.ndarray, seed: int):
    """Observed-arm event times and the true ITE; returns (T, theta_true)."""
    X = np.asarray(X, dtype=float)
    A = np.asarray(A)
    if not np.isin(A, (0, 1)).all():
        raise DgpError("treatment must be binary")
    rng = _rng(seed, 2)
    if spec.null_hte:
        # T(0) from the family's control process, T(1) = exp(c) T(0)
        c = null_effect_constant(spec)
        T = _sample_t_given_arm(spec, X, 0.0, rng) * np.exp(c * A)
        theta = np.full(X.shape[0], c)
    else:
        T = _sample_t_given_arm(spec, X, A, rng)
        theta = theta_true(spec, X)
    bad = ~np.isfinite(T) | (T <= 0.0) | ~np.isfinite(theta)
    if bad.any():
        raise DgpError(f"non-finite survival draw at row {int(np.flatnonzero(bad)[0])}")
    return T, theta


def sample_censoring(spec: DgpSpec, X: np.ndarray, A: np.ndarray, seed: int) -> np.ndarray:
    """Censoring times C (administrative caps are applied downstream)."""
    X = np.asarray(X, dtype=float)
    A = np.asarray(A, dtype=float)
    n = X.shape[0]
    rng = _rng(seed, 3)
    if spec.family == "henderson":
        return rng.uniform(6.5, 10.0, size=n)
    if spec.family == "hu":
        return rng.exponential(1.0 / HU_CENSOR_RATE, size=n)
    if spec.dgp_index == 1:
        # hazard 2 t e^f => cumulative hazard t^2 e^f
        f = (
            -1.75
            - 0.5 * np.sqrt(X[:, 1])
            + 0.2 * X[:, 2]
            + (1.15 + 0.5 * (X[:, 0] < 0.5) - 0.3 * np.sqrt(X[:, 1])) * A
        )
        return np.sqrt(rng.exponential(size=n) * np.exp(-f))
    if spec.dgp_index == 2:
        return rng.uniform(0.0, 3.0, size=n)
    if spec.dgp_index == 3:
        mu = 12.0 + np.log1p(np.exp(X[:, 2]))
    else:
        mu = 1.0 + np.log1p(np.exp(X[:, 2]))
    return _zero_truncated_poisson(rng, mu)


# ---------------------------------------------------------------------------
# dataset assembly


def generate_dataset(spec: DgpSpec) -> SurvivalDataset:
    """Generate one complete replication from a spec, deterministically."""
    if spec.family == "henderson":
        # frozen frame: covariates and treatment do not vary across seeds
        frame_seed = _HENDERSON_FRAME_SEED
        X = _gen_covariates(spec, frame_seed)
        e = propensity_true(spec, X)
        A = (_rng(frame_seed, 4).uniform(size=spec.n) < e).astype(int)
    else:
        X = _gen_covariates(spec, spec.seed)
        e = propensity_true(spec, X)
        A = (_rng(spec.seed, 4).uniform(size=spec.n) < e).astype(int)
    T, theta = sample_survival_times(spec, X, A, spec.seed)
    C = sample_censoring(spec, X, A, spec.seed)
    limit = np.minimum(C, spec.cap)
    Y = np.minimum(T, limit)
    delta = (T <= limit).astype(int)
    return SurvivalDataset(X=X, A=A, Y=Y, delta=delta, theta_true=theta,
                           e_true=e, T_latent=T)


def true_theta_oracle(spec: DgpSpec, x: np.ndarray, n_mc: int, seed: int):
    """Brute-force Monte-Carlo estimate of theta(x); returns (estimate, se).

    Uses the exact counterfactual samplers with independent draws per arm,
    so the reported standard error is honest.
    """
    if n_mc < 10**5:
        raise DgpError("n_mc must be at least 1e5")
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if x.shape[1] != spec.p:
        raise DgpError("covariate dimension mismatch")
    Xrep = np.repeat(x, n_mc, axis=0)
    rng1 = _rng(seed, 10)
    rng0 = _rng(seed, 11)
    if spec.null_hte:
        c = null_effect_constant(spec)
        logt0 = np.log(_sample_t_given_arm(spec, Xrep, 0.0, rng0))
        logt1 = np.log(_sample_t_given_arm(spec, Xrep, 0.0, rng1)) + c
    else:
        logt1 = np.log(_sample_t_given_arm(spec, Xrep, 1.0, rng1))
        logt0 = np.log(_sample_t_given_arm(spec, Xrep, 0.0, rng0))
    est = logt1.mean() - logt0.mean()
    se = np.sqrt(logt1.var(ddof=1) / n_mc + logt0.var(ddof=1) / n_mc)
    return float(est), float(se)


def export_csv(dataset: SurvivalDataset, path) -> None:
    """One CSV per replication; floats use shortest round-trip formatting."""
    p = dataset.X.shape[1]
    header = ["id", "A", "Y", "delta", "theta_true", "e_true"] + [
        f"x{j + 1}" for j in range(p)
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(dataset.n):
            row = [i, int(dataset.A[i]), repr(float(dataset.Y[i])),
                   int(dataset.delta[i]), repr(float(dataset.theta_true[i])),
                   repr(float(dataset.e_true[i]))]
            row += [repr(float(v)) for v in dataset.X[i]]
            writer.writerow(row)
