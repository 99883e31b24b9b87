"""Command-line entry points.

Exit codes: 0 success, 2 usage error, 3 numeric failure during training,
4 missing artifact. The output root defaults to ./runs, overridable with
the CSFM_OUT environment variable.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import runner
from .artifacts import load_config
from .flow import TrainConfig, TrainingDiverged
from .presets import PRESET_NAMES, build_preset

EXIT_NUMERIC = 3
EXIT_MISSING = 4


def _default_out_root():
    import os
    return Path(os.environ.get("CSFM_OUT", "runs"))


@click.group()
def main():
    """2D conditional flow matching lab."""


@main.command()
@click.option("--preset", "preset_name", type=str, default=None,
              help="Preset name; see --list-presets.")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Path to a resolved config.json to run instead of a preset.")
@click.option("--dataset", type=click.Choice(["eight_gaussians", "two_moons"]),
              default="eight_gaussians", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Run directory (default: <out_root>/<preset>-<dataset>-s<seed>).")
@click.option("--list-presets", is_flag=True, help="Print the preset catalog.")
def run(preset_name, config_path, dataset, seed, out_dir, list_presets):
    """Train a preset or an explicit config and emit all run artifacts."""
    if list_presets:
        for name in PRESET_NAMES:
            click.echo(name)
        return
    if (preset_name is None) == (config_path is None):
        raise click.UsageError("exactly one of --preset / --config is required")
    try:
        if preset_name is not None:
            if preset_name not in PRESET_NAMES:
                raise click.UsageError(f"unknown preset {preset_name!r}")
            if out_dir is None:
                out_dir = _default_out_root() / f"{preset_name}-{dataset}-s{seed}"
            run_dir = runner.run_preset(preset_name, seed=seed,
                                        out_dir=out_dir, dataset=dataset)
        else:
            with open(config_path) as fh:
                cfg = TrainConfig.from_dict(json.load(fh))
            if out_dir is None:
                out_dir = _default_out_root() / f"config-s{cfg.seed}"
            run_dir = runner.run_config(cfg, out_dir)
    except FileNotFoundError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_MISSING)
    except TrainingDiverged as exc:
        click.echo(f"error: training diverged: {exc}", err=True)
        click.echo(f"state: {json.dumps(exc.state_dump)}", err=True)
        sys.exit(EXIT_NUMERIC)
    click.echo(str(run_dir))


@main.command("sweep-steps")
@click.option("--run", "run_dir", type=click.Path(), required=True)
@click.option("--steps", default="2,3,5,10,50", show_default=True,
              help="Comma-separated Euler step counts.")
def sweep_steps_cmd(run_dir, steps):
    """Few-step generation sweep against held-out targets."""
    try:
        counts = [int(s) for s in steps.split(",") if s]
    except ValueError:
        raise click.UsageError(f"bad --steps value {steps!r}")
    try:
        out = runner.sweep_steps(run_dir, counts)
    except FileNotFoundError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_MISSING)
    click.echo(str(out))


@main.command()
@click.option("--run", "run_dir", type=click.Path(), required=True)
def gradvar(run_dir):
    """Gradient-variance profile of the stored final checkpoint."""
    try:
        out = runner.gradvar_probe(run_dir)
    except FileNotFoundError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_MISSING)
    click.echo(str(out))


@main.command()
@click.option("--run", "run_dir", type=click.Path(), required=True)
def reflow(run_dir):
    """Reflow fine-tune of the stored flow; source stays frozen."""
    try:
        out = runner.reflow_run(run_dir)
    except FileNotFoundError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_MISSING)
    except TrainingDiverged as exc:
        click.echo(f"error: reflow diverged: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)
    click.echo(str(out))


@main.command()
@click.option("--run", "run_dir", type=click.Path(), required=True)
def plot(run_dir):
    """Re-render plots/*.svg from the run's CSVs."""
    from .plotting import render_run_plots
    try:
        outs = render_run_plots(run_dir)
    except FileNotFoundError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_MISSING)
    for p in outs:
        click.echo(str(p))


if __name__ == "__main__":
    main()
