"""Command-line entry points for the survey design pipeline."""

from __future__ import annotations

import dataclasses
import sys
from pathlib import Path

import click
import pandas as pd

from . import allocation as alc
from . import pipeline as pl
from .popgen import VARIABLES

EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_CHECKS = 4


def _load_config(config_path, seed):
    try:
        cfg = pl.RunConfig.from_toml(config_path) if config_path else pl.RunConfig()
        if seed is not None:
            cfg.seed = seed
            cfg.population = dataclasses.replace(cfg.population, seed=seed)
        return cfg
    except pl.ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


def _run(cfg, out, stages, strict=False):
    try:
        manifest = pl.run_pipeline(cfg, out, stages=stages, strict=strict)
    except pl.ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except pl.StageError as exc:
        message = str(exc)
        click.echo(f"stage failure: {message}", err=True)
        sys.exit(EXIT_CHECKS if "strict report" in message else EXIT_STAGE)
    for entry in manifest["stages"]:
        click.echo(f"{entry['name']}: {len(entry['outputs'])} files in {entry['seconds']:.1f}s")
    return manifest


@click.group()
def main():
    """Survey allocation and model-assisted sample reduction pipeline."""


def _stage_command(name, help_text):
    @main.command(name=name, help=help_text)
    @click.option("--config", type=click.Path(), default=None, help="Run config TOML.")
    @click.option("--out", type=click.Path(), required=True, help="Run directory.")
    @click.option("--seed", type=int, default=None, help="Override the global seed.")
    def _cmd(config, out, seed, _stage=name):
        cfg = _load_config(config, seed)
        _run(cfg, out, stages=(_stage,))

    return _cmd


_stage_command("synth", "Generate the synthetic population.")
_stage_command("baseline", "Draw and summarise the baseline sample.")
_stage_command("mc", "Run the Monte Carlo replication study.")


@main.command()
@click.option("--config", type=click.Path(), default=None, help="Run config TOML.")
@click.option("--out", type=click.Path(), required=True, help="Run directory or allocation CSV.")
@click.option("--seed", type=int, default=None)
@click.option(
    "--method",
    type=click.Choice(["neyman", "nso-max", "bethel", "all"]),
    default="all",
    help="Allocation rule for --inputs mode.",
)
@click.option("--inputs", type=click.Path(), default=None, help="Standalone problem JSON.")
@click.option("--variable", type=str, default=None, help="Variable for --method neyman.")
def allocate(config, out, seed, method, inputs, variable):
    """Allocation stage, or a standalone solve of a problem file."""
    if inputs is None:
        cfg = _load_config(config, seed)
        _run(cfg, out, stages=("allocate",))
        return
    if not Path(inputs).exists():
        click.echo(f"stage failure: problem file not found: {inputs}", err=True)
        sys.exit(EXIT_STAGE)
    problem, targets = alc.VarianceInputs.from_json(inputs)
    if targets is None:
        click.echo("config error: problem file carries no precision targets", err=True)
        sys.exit(EXIT_CONFIG)
    frame = pd.DataFrame({"stratum": range(problem.n_strata)})
    try:
        if method in ("neyman", "all", "nso-max"):
            variables = [variable] if variable else list(problem.variables)
            per_var = {
                v: alc.neyman_allocation(problem, v, targets=targets) for v in variables
            }
            if method != "nso-max":
                for v, a in per_var.items():
                    frame[f"neyman_{v}"] = a.counts
            if method in ("nso-max", "all"):
                frame["nso_max"] = alc.nso_max_allocation(per_var).counts
        if method in ("bethel", "all"):
            frame["bethel"] = alc.bethel_solve(problem, targets).allocation.counts
    except (ValueError, RuntimeError) as exc:
        click.echo(f"stage failure: {exc}", err=True)
        sys.exit(EXIT_STAGE)
    frame.to_csv(out, index=False)
    click.echo(f"wrote {out}")


@main.command()
@click.option("--config", type=click.Path(), default=None, help="Run config TOML.")
@click.option("--out", type=click.Path(), required=True, help="Run directory.")
@click.option("--seed", type=int, default=None)
@click.option("--variable", type=str, default="all", help="Restrict the search (default all).")
@click.option("--alpha-grid", type=str, default=None, help="Comma-separated grid override.")
@click.option("--thresholds", type=click.Path(), default=None, help="Gate thresholds TOML.")
def reduce(config, out, seed, variable, alpha_grid, thresholds):
    """Run the reduction search over the candidate fraction grid."""
    cfg = _load_config(config, seed)
    if variable != "all" and variable not in VARIABLES:
        click.echo(f"config error: unknown variable {variable!r}", err=True)
        sys.exit(EXIT_CONFIG)
    if alpha_grid is not None:
        try:
            grid = tuple(float(a) for a in alpha_grid.split(","))
        except ValueError:
            click.echo(f"config error: bad alpha grid {alpha_grid!r}", err=True)
            sys.exit(EXIT_CONFIG)
        cfg.reduction = dataclasses.replace(cfg.reduction, alpha_grid=grid)
    if thresholds is not None:
        if sys.version_info >= (3, 11):
            import tomllib
        else:
            import tomli as tomllib
        try:
            with open(thresholds, "rb") as fh:
                raw = tomllib.load(fh)
            cfg.reduction = dataclasses.replace(
                cfg.reduction,
                **{
                    k: raw[k]
                    for k in ("national_are", "domain_mare", "domain_max_are")
                    if k in raw
                },
            )
        except (OSError, tomllib.TOMLDecodeError) as exc:
            click.echo(f"config error: cannot read thresholds: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
    _run(cfg, out, stages=("reduce",))


@main.command()
@click.option("--config", type=click.Path(), default=None, help="Run config TOML.")
@click.option("--out", type=click.Path(), required=True, help="Run directory.")
@click.option("--seed", type=int, default=None)
@click.option("--strict", is_flag=True, help="Exit nonzero when a check fails.")
def report(config, out, seed, strict):
    """Render the run report and evaluate the configured checks."""
    cfg = _load_config(config, seed)
    _run(cfg, out, stages=("report",), strict=strict)


@main.command()
@click.option("--config", type=click.Path(), default=None, help="Run config TOML.")
@click.option("--out", type=click.Path(), required=True, help="Run directory.")
@click.option("--seed", type=int, default=None)
@click.option(
    "--stage",
    type=click.Choice(pl.STAGES),
    default=None,
    help="Run a single stage instead of the full pipeline.",
)
@click.option("--strict", is_flag=True, help="Strict report checks.")
def pipeline(config, out, seed, stage, strict):
    """Run every stage in order (or one stage with --stage)."""
    cfg = _load_config(config, seed)
    stages = (stage,) if stage else pl.STAGES
    _run(cfg, out, stages=stages, strict=strict)


if __name__ == "__main__":
    main()
