"""Experiment driver: configuration, replication loop, seeding, persistence.

A run walks every (scenario, replication) pair, simulates a dataset, fits
the propensity ensemble once, then fits each requested effect estimator
under each hyperparameter variant and scores it.  Seeds derive from the
configured base and a stable content hash, so reruns — with any worker
count — produce byte-identical CSV output.  Failed fits are logged and
skipped rather than averaged in.
"""

from __future__ import annotations

import hashlib
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import bart, csf, dgp, metrics, propensity

RESULT_COLUMNS = [
    "family", "dgp", "estimator", "variant", "rep", "seed", "n",
    "bias", "rmse", "misclass", "hl", "coverage", "null_flag_prop",
    "censor_rate",
]
DETAIL_COLUMNS = [
    "rep", "family", "dgp", "estimator", "variant", "id",
    "theta_true", "theta_hat", "lo", "hi", "flag_hte",
]

PROFILES = {
    "desk": {
        "reps": 10,
        "bart_iterations": 1500,
        "bart_burn_in": 300,
        "csf_num_trees": 1000,
    },
    "paper": {
        "reps": 50,
        "bart_iterations": 2500,
        "bart_burn_in": 500,
        "csf_num_trees": 2000,
    },
}


class ConfigError(ValueError):
    pass


class RunError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    specs: list[dgp.DgpSpec]
    estimators: list[str] = field(default_factory=lambda: ["bart", "csf"])
    hyper_variants: list[str] = field(default_factory=lambda: ["default"])
    reps: int = 10
    n: int = 1000
    seed_base: int = 0
    output_dir: str = "out"
    overrides: dict[str, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if not self.estimators:
            raise ConfigError("estimators must be nonempty")
        for e in self.estimators:
            if e not in ("bart", "csf"):
                raise ConfigError(f"unknown estimator {e!r}")
        for v in self.hyper_variants:
            if v not in ("default", "improved"):
                raise ConfigError(f"unknown hyper variant {v!r}")
        if not self.specs:
            raise ConfigError("at least one [spec] block required")


def _parse_scalar(value: str):
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def parse_config(path) -> ExperimentConfig:
    """Flat key-value config with one [spec] block per scenario.

    Global keys come first; `[bart]` / `[csf]` blocks override estimator
    internals; each `[spec]` block needs `family` and `dgp`, optionally
    `null` and (henderson only) `residual`.
    """
    text = Path(path).read_text()
    globals_, spec_blocks = {}, []
    overrides: dict[str, dict] = {}
    current: dict | None = None
    current_name = ""
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip().lower()
            if name == "spec":
                current = {}
                spec_blocks.append(current)
            elif name in ("bart", "csf"):
                current = overrides.setdefault(name, {})
            else:
                raise ConfigError(f"unknown section [{name}]")
            current_name = name
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        target = globals_ if current is None else current
        target[key] = _parse_scalar(value)

    known = {"reps", "n", "seed_base", "output_dir", "estimators",
             "hyper_variants"}
    unknown = set(globals_) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    def as_list(value, default):
        if value is None:
            return list(default)
        return [part.strip() for part in str(value).split(",") if part.strip()]

    n = int(globals_.get("n", 1000))
    seed_base = int(globals_.get("seed_base", 0))
    specs = []
    for block in spec_blocks:
        extra = set(block) - {"family", "dgp", "null", "residual"}
        if extra:
            raise ConfigError(f"unknown [spec] keys: {sorted(extra)}")
        if "family" not in block or "dgp" not in block:
            raise ConfigError("[spec] blocks need family and dgp")
        try:
            specs.append(
                dgp.DgpSpec(
                    family=str(block["family"]),
                    dgp_index=int(block["dgp"]),
                    n=n,
                    seed=0,  # replication seeds assigned at run time
                    null_hte=bool(block.get("null", False)),
                    residual_law=block.get("residual"),
                )
            )
        except dgp.DgpError as exc:
            raise ConfigError(str(exc)) from exc
    try:
        return ExperimentConfig(
            specs=specs,
            estimators=as_list(globals_.get("estimators"), ["bart", "csf"]),
            hyper_variants=as_list(globals_.get("hyper_variants"), ["default"]),
            reps=int(globals_.get("reps", 10)),
            n=n,
            seed_base=seed_base,
            output_dir=str(globals_.get("output_dir", "out")),
            overrides=overrides,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def stable_hash(*parts) -> int:
    """Deterministic 63-bit hash of the joined string parts."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def replication_seed(seed_base, family, dgp_index, rep) -> int:
    return seed_base ^ stable_hash(family, dgp_index, rep)


def build_bart_hyper(config: ExperimentConfig, profile: str,
                     variant: str) -> bart.BartHyperparams:
    prof = PROFILES[profile]
    kw = {
        "iterations": prof["bart_iterations"],
        "burn_in": prof["bart_burn_in"],
        "k": 1.0 if variant == "improved" else 2.0,
    }
    kw.update(config.overrides.get("bart", {}))
    return bart.BartHyperparams(**kw)


def build_csf_hyper(config: ExperimentConfig, profile: str,
                    variant: str) -> csf.CsfHyperparams:
    prof = PROFILES[profile]
    kw = {
        "num_trees": prof["csf_num_trees"],
        "min_node_size": 2 if variant == "improved" else 5,
    }
    kw.update(config.overrides.get("csf", {}))
    return csf.CsfHyperparams(**kw)


@dataclass
class _AugmentedData:
    X: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    delta: np.ndarray


def _score_common(theta_hat, ci, dataset):
    bias, rmse = metrics.bias_rmse(theta_hat, dataset.theta_true)
    try:
        hl = metrics.hosmer_lemeshow(theta_hat, dataset.theta_true)
    except metrics.MetricError:
        hl = float("nan")  # degenerate constant predictions
    cov = metrics.coverage(ci, dataset.theta_true)
    return bias, rmse, hl, cov


def _fit_bart(dataset, X_aug, hyper, seed):
    post = bart.fit(X_aug, dataset.A, dataset.Y, dataset.delta, hyper, seed)
    theta_hat = post.theta_draws.mean(axis=1)
    ci = bart.credible_interval(post)
    bias, rmse, hl, cov = _score_common(theta_hat, ci, dataset)
    try:
        mis = metrics.misclass_bart(post.theta_draws, dataset.theta_true)
    except metrics.MetricError:
        mis = float("nan")  # exact-null truth: sign error undefined
    d = bart.posterior_d_statistics(post)
    flags = (d <= 0.025) | (d >= 0.975)
    return theta_hat, ci, flags, dict(
        bias=bias, rmse=rmse, misclass=mis, hl=hl, coverage=cov,
        null_flag_prop=float(flags.mean()),
    )


def _fit_csf(dataset, X_aug, hyper, seed):
    data = _AugmentedData(X=X_aug, A=dataset.A, Y=dataset.Y,
                          delta=dataset.delta)
    est = csf.csf_estimate_ite(data, hyper, seed)
    bias, rmse, hl, cov = _score_common(est.theta_hat, est.ci, dataset)
    try:
        mis = metrics.misclass_csf(est.theta_hat, dataset.theta_true)
    except metrics.MetricError:
        mis = float("nan")
    theta_bar = est.theta_hat.mean()
    flags = (theta_bar < est.ci[:, 0]) | (theta_bar > est.ci[:, 1])
    return est.theta_hat, est.ci, flags, dict(
        bias=bias, rmse=rmse, misclass=mis, hl=hl, coverage=cov,
        null_flag_prop=metrics.null_flags_csf(est.theta_hat, est.ci),
    )


def run_replication(spec: dgp.DgpSpec, rep: int, config: ExperimentConfig,
                    profile: str):
    """All estimator fits for one (scenario, replication); returns
    (result_rows, detail_rows, failure_messages)."""
    seed = replication_seed(config.seed_base, spec.family, spec.dgp_index, rep)
    rows, details, failures = [], [], []
    key = f"{spec.family}/dgp{spec.dgp_index}/rep{rep}"
    try:
        dataset = dgp.generate_dataset(replace(spec, seed=seed))
        prop_seed = stable_hash("propensity", seed)
        pfit = propensity.fit_propensity(dataset.X, dataset.A, seed=prop_seed)
        X_aug = propensity.augment(dataset.X, pfit.ehat)
    except Exception:
        failures.append(f"{key}: data/propensity stage failed\n"
                        + traceback.format_exc())
        return rows, details, failures
    for estimator in config.estimators:
        for variant in config.hyper_variants:
            fit_seed = stable_hash(estimator, variant, seed) & (2**32 - 1)
            try:
                if estimator == "bart":
                    hyper = build_bart_hyper(config, profile, variant)
                    theta_hat, ci, flags, scores = _fit_bart(
                        dataset, X_aug, hyper, fit_seed)
                else:
                    hyper = build_csf_hyper(config, profile, variant)
                    theta_hat, ci, flags, scores = _fit_csf(
                        dataset, X_aug, hyper, fit_seed)
            except Exception:
                failures.append(f"{key}/{estimator}/{variant}: fit failed\n"
                                + traceback.format_exc())
                continue
            rows.append({
                "family": spec.family,
                "dgp": spec.dgp_index,
                "estimator": estimator,
                "variant": variant,
                "rep": rep,
                "seed": seed,
                "n": spec.n,
                "censor_rate": dataset.censor_rate,
                **scores,
            })
            for i in range(dataset.n):
                details.append({
                    "rep": rep,
                    "family": spec.family,
                    "dgp": spec.dgp_index,
                    "estimator": estimator,
                    "variant": variant,
                    "id": i,
                    "theta_true": dataset.theta_true[i],
                    "theta_hat": theta_hat[i],
                    "lo": ci[i, 0],
                    "hi": ci[i, 1],
                    "flag_hte": bool(flags[i]),
                })
    return rows, details, failures


def _task(args):
    return run_replication(*args)


def write_resolved_config(config: ExperimentConfig, profile: str, path):
    lines = [
        f"profile = {profile}",
        f"reps = {config.reps}",
        f"n = {config.n}",
        f"seed_base = {config.seed_base}",
        f"output_dir = {config.output_dir}",
        f"estimators = {','.join(config.estimators)}",
        f"hyper_variants = {','.join(config.hyper_variants)}",
    ]
    for variant in config.hyper_variants:
        if "bart" in config.estimators:
            h = build_bart_hyper(config, profile, variant)
            lines.append(f"bart[{variant}] = {h}")
        if "csf" in config.estimators:
            h = build_csf_hyper(config, profile, variant)
            lines.append(f"csf[{variant}] = {h}")
    for spec in config.specs:
        lines.append("[spec]")
        lines.append(f"family = {spec.family}")
        lines.append(f"dgp = {spec.dgp_index}")
        lines.append(f"null = {str(spec.null_hte).lower()}")
        if spec.residual_law is not None:
            lines.append(f"residual = {spec.residual_law}")
    Path(path).write_text("\n".join(lines) + "\n")


def _format_value(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(rows, columns, path):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_format_value(row[c]) for c in columns) + "\n")


def run(config: ExperimentConfig, profile: str = "desk", workers: int = 1):
    """Execute the experiment; writes results.csv, details.csv,
    resolved_config.txt, and failures.log under config.output_dir."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    out = Path(config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output dir not writable: {exc}") from exc

    tasks = [(spec, rep, config, profile)
             for spec in config.specs for rep in range(config.reps)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_task, tasks))
    else:
        outcomes = [_task(t) for t in tasks]

    rows, details, failures = [], [], []
    for r, d, f in outcomes:
        rows.extend(r)
        details.extend(d)
        failures.extend(f)

    sort_key = lambda row: (row["family"], row["dgp"], row["estimator"],
                            row["variant"], row["rep"])
    rows.sort(key=sort_key)
    details.sort(key=lambda row: (row["family"], row["dgp"], row["estimator"],
                                  row["variant"], row["rep"], row["id"]))
    _write_csv(rows, RESULT_COLUMNS, out / "results.csv")
    _write_csv(details, DETAIL_COLUMNS, out / "details.csv")
    write_resolved_config(config, profile, out / "resolved_config.txt")
    (out / "failures.log").write_text("\n".join(failures))
    if failures and not rows:
        raise RunError("all replications failed; see failures.log")
    return rows


METRIC_COLUMNS = ["bias", "rmse", "misclass", "hl", "coverage",
                  "null_flag_prop", "censor_rate"]


def aggregate(results_path, out_path):
    """Group results.csv by scenario and estimator; write mean and SE per
    metric with the completed replication count."""
    frame = pd.read_csv(results_path)
    if frame.empty:
        raise RunError("results file has no rows")
    for col in ["family", "dgp", "estimator", "variant", *METRIC_COLUMNS]:
        if col not in frame.columns:
            raise RunError(f"results file missing column {col!r}")
    keys = ["family", "dgp", "estimator", "variant"]
    out_rows = []
    for key_vals, grp in frame.groupby(keys, sort=True):
        row = dict(zip(keys, key_vals))
        row["reps_used"] = len(grp)
        for m in METRIC_COLUMNS:
            vals = grp[m].to_numpy(dtype=float)
            row[f"mean_{m}"] = float(np.mean(vals))
            if len(vals) > 1:
                row[f"se_{m}"] = float(np.std(vals, ddof=1) / np.sqrt(len(vals)))
            else:
                row[f"se_{m}"] = 0.0
        out_rows.append(row)
    columns = keys + ["reps_used"]
    for m in METRIC_COLUMNS:
        columns += [f"mean_{m}", f"se_{m}"]
    _write_csv(out_rows, columns, out_path)
    return out_rows


def truth_oracle_table(family, dgp_index, n_mc, seed, null_hte=False):
    """Analytic vs Monte-Carlo θ at 10 frozen probe covariate rows."""
    spec = dgp.DgpSpec(family=family, dgp_index=dgp_index, n=10,
                       seed=stable_hash("probe", family, dgp_index) % 2**31,
                       null_hte=null_hte)
    probe = dgp.generate_dataset(replace(spec, null_hte=False)).X
    analytic = dgp.theta_true(spec, probe)
    rows = []
    for i in range(probe.shape[0]):
        mc, se = dgp.true_theta_oracle(spec, probe[i], n_mc=n_mc,
                                       seed=stable_hash("oracle", seed, i))
        rows.append({
            "probe": i,
            "analytic": float(analytic[i]),
            "monte_carlo": mc,
            "mc_se": se,
        })
    return rows
