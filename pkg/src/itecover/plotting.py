"""Figure rendering from aggregated results.

One panel per (family, metric): grouped dots by DGP index, colored by
estimator, open/filled by hyperparameter variant, with ±1 Monte-Carlo SE
error bars.  Coverage panels carry a horizontal 0.95 reference line.
Output is deterministic so SVG snapshots diff cleanly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
import numpy as np
import pandas as pd

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

DEFAULT_METRICS = ["bias", "rmse", "misclass", "hl", "coverage",
                   "null_flag_prop"]
_ESTIMATOR_ORDER = ["bart", "csf"]
_VARIANT_ORDER = ["default", "improved"]
_COLORS = {"bart": "#1f77b4", "csf": "#d62728"}


class PlotError(ValueError):
    pass


@dataclass
class FigureSpec:
    input_path: str
    output_dir: str
    metrics: list[str] = field(default_factory=lambda: list(DEFAULT_METRICS))
    image_format: str = "svg"

    def __post_init__(self):
        if self.image_format not in ("svg", "png"):
            raise PlotError(f"unsupported format {self.image_format!r}")


def _deterministic_rc():
    # strip run-dependent metadata so identical inputs give identical bytes
    matplotlib.rcParams["svg.hashsalt"] = "itecover"
    matplotlib.rcParams["svg.fonttype"] = "path"


def _plot_panel(ax, grp, metric):
    dgps = sorted(grp["dgp"].unique())
    offset_step = 0.18
    combos = [(e, v) for e in _ESTIMATOR_ORDER for v in _VARIANT_ORDER]
    combos = [c for c in combos
              if ((grp["estimator"] == c[0]) & (grp["variant"] == c[1])).any()]
    for ci, (est, var) in enumerate(combos):
        sub = grp[(grp["estimator"] == est) & (grp["variant"] == var)]
        xs, ys, errs = [], [], []
        for k, d in enumerate(dgps):
            row = sub[sub["dgp"] == d]
            if row.empty:
                continue
            xs.append(k + (ci - (len(combos) - 1) / 2) * offset_step)
            ys.append(float(row[f"mean_{metric}"].iloc[0]))
            errs.append(float(row[f"se_{metric}"].iloc[0]))
        ax.errorbar(
            xs, ys, yerr=errs,
            fmt="o" if var == "default" else "s",
            mfc=_COLORS[est] if var == "default" else "white",
            color=_COLORS[est], capsize=3,
            label=f"{est.upper()} ({var})",
        )
    if metric == "coverage":
        ax.axhline(0.95, color="gray", linestyle="--", linewidth=1)
    ax.set_xticks(range(len(dgps)))
    ax.set_xticklabels([f"DGP{d}" for d in dgps])
    ax.set_ylabel(metric)
    ax.legend(fontsize=8, loc="best")


def render(figure_spec: FigureSpec) -> list[Path]:
    """Render one image per (family, metric); returns written paths."""
    frame = pd.read_csv(figure_spec.input_path)
    needed = {"family", "dgp", "estimator", "variant"}
    missing = needed - set(frame.columns)
    if missing:
        raise PlotError(
            f"input missing columns {sorted(missing)}; "
            f"available: {sorted(frame.columns)}"
        )
    out_dir = Path(figure_spec.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _deterministic_rc()
    written = []
    for metric in figure_spec.metrics:
        col = f"mean_{metric}"
        if col not in frame.columns:
            raise PlotError(
                f"metric column {col!r} not found; available: "
                f"{sorted(c for c in frame.columns if c.startswith('mean_'))}"
            )
        if frame[col].isna().all():
            warnings.warn(f"metric {metric!r} is empty; panel skipped")
            continue
        for family in sorted(frame["family"].unique()):
            grp = frame[frame["family"] == family]
            fig, ax = plt.subplots(figsize=(6, 4))
            _plot_panel(ax, grp, metric)
            ax.set_title(f"{family}: {metric}")
            fig.tight_layout()
            path = out_dir / f"{family}_{metric}.{figure_spec.image_format}"
            fig.savefig(path, format=figure_spec.image_format,
                        metadata=_fixed_metadata(figure_spec.image_format))
            plt.close(fig)
            written.append(path)
    return written


def _fixed_metadata(fmt):
    if fmt == "svg":
        return {"Date": None}  # drop the timestamp for byte-stable output
    return None
