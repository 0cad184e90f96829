"""Command line surface: ``avb run``, ``avb validate``, ``avb replay``.

Configs are JSON files (see the README for the schema). The ``AVB_LOG``
environment variable sets the log level (e.g. ``AVB_LOG=INFO``). All runs are
deterministic given the config and master seed, regardless of ``--jobs``.
"""

from __future__ import annotations

import functools
import json
import logging
import os

import click

from .errors import AvbError
from .experiments import (
    ExperimentConfig,
    replay_result,
    run_and_save,
    run_experiment,
)


def _avb_errors(func):
    """Map library errors to clean CLI failures instead of tracebacks."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except AvbError as exc:
            raise click.ClickException(str(exc)) from exc

    return wrapper


@click.group()
def main():
    """Adaptive variational Bayes experiments."""
    level_name = os.environ.get("AVB_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level)


def _load_with_overrides(config_path, seed, out) -> ExperimentConfig:
    config = ExperimentConfig.load(config_path)
    updates = {}
    if seed is not None:
        updates["master_seed"] = seed
    if out is not None:
        updates["output_dir"] = out
    if updates:
        config = ExperimentConfig.from_dict({**config.to_dict(), **updates})
    return config


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--jobs", type=click.IntRange(min=1), default=1,
              help="Parallel repeats; never changes the results.")
@click.option("--out", type=click.Path(file_okay=False), default=None,
              help="Output directory (overrides the config).")
@click.option("--seed", type=click.IntRange(min=0), default=None,
              help="Master seed (overrides the config).")
@_avb_errors
def run(config_path, jobs, out, seed):
    """Run every repeat of the experiment described by CONFIG_PATH."""
    config = _load_with_overrides(config_path, seed, out)
    if config.output_dir is not None:
        paths = run_and_save(config, config.output_dir, jobs=jobs)
        results = None
        for path in paths:
            if path.name.startswith("result_repeat"):
                payload = json.loads(path.read_text())
                line = (
                    f"repeat {payload['repeat_index']}: "
                    f"selected model {payload['selected_model']}"
                )
                for key in ("rmse_raw_averaged", "label_accuracy"):
                    if key in payload["metrics"]:
                        line += f", {key}={payload['metrics'][key]:.4f}"
                click.echo(line)
        click.echo(f"wrote {len(paths)} files to {config.output_dir}")
    else:
        results = run_experiment(config, jobs=jobs)
        click.echo(
            json.dumps(
                [r.to_json_dict() for r in results], sort_keys=True, indent=2
            )
        )


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@_avb_errors
def validate(config_path):
    """Check that CONFIG_PATH parses and satisfies all invariants."""
    config = ExperimentConfig.load(config_path)
    click.echo(
        f"OK: {config.kind} experiment, {len(config.model_grid)} models, "
        f"{config.repeats} repeat(s), master seed {config.master_seed}"
    )


@main.command()
@click.argument("result_path", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
@_avb_errors
def replay(ctx, result_path):
    """Recompute model weights from RESULT_PATH and verify the stored ones."""
    report = replay_result(result_path)
    if report.passed:
        click.echo(
            f"PASS: max weight difference {report.max_abs_gamma_diff:.3e} "
            f"<= {report.tolerance:.0e}"
        )
    else:
        click.echo(
            f"FAIL: max weight difference {report.max_abs_gamma_diff:.3e} "
            f"> {report.tolerance:.0e}"
        )
        ctx.exit(1)


if __name__ == "__main__":
    main()
