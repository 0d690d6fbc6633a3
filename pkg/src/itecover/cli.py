"""Command-line surface: run experiments, aggregate, probe truth, plot."""

from __future__ import annotations

import sys

import click

from . import harness, plotting

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


@click.group()
def main():
    """Simulation laboratory for individualized treatment effect intervals."""


@main.command("run")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=False))
@click.option("--profile", default="desk",
              type=click.Choice(["desk", "paper"]))
@click.option("--workers", default=1, type=int)
def run_cmd(config_path, profile, workers):
    """Execute every configured scenario and write the result CSVs."""
    try:
        config = harness.parse_config(config_path)
    except (OSError, harness.ConfigError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        rows = harness.run(config, profile=profile, workers=workers)
    except harness.ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except harness.RunError as exc:
        click.echo(f"run failed: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)
    click.echo(f"wrote {len(rows)} result rows to {config.output_dir}")


@main.command("aggregate")
@click.option("--in", "in_path", required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def aggregate_cmd(in_path, out_path):
    """Summarize results.csv into per-scenario means and SEs."""
    try:
        rows = harness.aggregate(in_path, out_path)
    except harness.RunError as exc:
        click.echo(f"aggregate failed: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)
    click.echo(f"wrote {len(rows)} aggregate rows to {out_path}")


@main.command("truth-oracle")
@click.option("--family", required=True,
              type=click.Choice(["henderson", "cui", "hu"]))
@click.option("--dgp", required=True, type=click.IntRange(1, 4))
@click.option("--nmc", default=10**6, type=int)
@click.option("--seed", default=7, type=int)
@click.option("--null", "null_hte", is_flag=True, default=False)
def truth_oracle_cmd(family, dgp, nmc, seed, null_hte):
    """Print analytic vs Monte-Carlo θ at 10 frozen probe points."""
    rows = harness.truth_oracle_table(family, dgp, nmc, seed,
                                      null_hte=null_hte)
    click.echo(f"{'probe':>5} {'analytic':>12} {'monte_carlo':>12} "
               f"{'mc_se':>10}")
    for row in rows:
        click.echo(f"{row['probe']:>5} {row['analytic']:>12.6f} "
                   f"{row['monte_carlo']:>12.6f} {row['mc_se']:>10.6f}")


@main.command("plots")
@click.option("--in", "in_path", required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--format", "image_format", default="svg",
              type=click.Choice(["svg", "png"]))
def plots_cmd(in_path, out_dir, image_format):
    """Render per-family metric panels from aggregate.csv."""
    spec = plotting.FigureSpec(input_path=in_path, output_dir=out_dir,
                               image_format=image_format)
    try:
        written = plotting.render(spec)
    except plotting.PlotError as exc:
        click.echo(f"plot error: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)
    click.echo(f"wrote {len(written)} figures to {out_dir}")


if __name__ == "__main__":
    main()
