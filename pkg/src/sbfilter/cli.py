"""Command-line entry points: generate, filter, sweep, posterior-test, verify-identity.

Every subcommand shares the same flag family: ``--config`` (a JSON file path
or a built-in preset name), ``--seed`` (overrides the config seed),
``--out`` (output directory), ``--threads`` (compute-thread cap).  Commands
exit 0 only on full success; a filter failure inside an experiment exits 1
after writing whatever completed.
"""

from __future__ import annotations

import dataclasses
import json
import os
import sys

import click

from sbfilter import harness


def _apply_threads(threads) -> None:
    if threads is None:
        return
    import numba

    numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))


def _small_config(config, allowed: set, where: str) -> dict:
    """Load the lightweight JSON config some subcommands take."""
    if config is None:
        return {}
    with open(config) as fh:
        tree = json.load(fh)
    unknown = sorted(set(tree) - allowed)
    if unknown:
        raise click.ClickException(
            f"unknown {where} key(s): {', '.join(unknown)}"
        )
    return tree


def _experiment_config(config, seed) -> "harness.ExperimentConfig":
    try:
        cfg = harness.load_config(config)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise click.ClickException(str(exc))
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(seed))
    return cfg


@click.group()
def main() -> None:
    """Training-free ensemble filtering via static bridge generation."""


@main.command()
@click.option("--config", default=None,
              help="JSON with any of: n_data, noise, B_out, N, seed.")
@click.option("--seed", type=int, default=None, help="Override the seed.")
@click.option("--out", default=".", show_default=True,
              help="Directory for points.csv.")
@click.option("--threads", type=int, default=None, help="Compute-thread cap.")
def generate(config, seed, out, threads) -> None:
    """Bridge-generate a cloud from a two-moons sample; write points.csv."""
    _apply_threads(threads)
    params = _small_config(config, {"n_data", "noise", "B_out", "N", "seed"},
                           "generate config")
    if seed is not None:
        params["seed"] = seed
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "points.csv")
    cloud = harness.generate_two_moons_cloud(**params, out_path=path)
    click.echo(f"wrote {cloud.shape[0]} generated points to {path}")


@main.command("filter")
@click.option("--config", required=True,
              help="Experiment JSON file or preset name "
                   f"({', '.join(sorted(harness.PRESETS))}).")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", required=True, help="Directory for CSVs and manifest.")
@click.option("--threads", type=int, default=None, help="Compute-thread cap.")
def filter_cmd(config, seed, out, threads) -> None:
    """Run every configured filter over repeated truth simulations."""
    _apply_threads(threads)
    cfg = _experiment_config(config, seed)
    result = harness.run_experiment(cfg, out_dir=out)
    for r, method, msg in result.failures:
        click.echo(f"FAILED repeat {r} filter {method}: {msg}", err=True)
    click.echo(
        f"{len(result.records)} filter runs completed; outputs in {out} "
        f"(config sha256 {result.config_sha256[:12]})"
    )
    if result.failures:
        sys.exit(1)


@main.command()
@click.option("--config", required=True,
              help="Experiment JSON (must contain a sweep section) or preset.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", required=True, help="Directory for sweep.csv.")
@click.option("--threads", type=int, default=None, help="Compute-thread cap.")
def sweep(config, seed, out, threads) -> None:
    """Terminal smoothed-RMSE versus ensemble size or step count."""
    _apply_threads(threads)
    cfg = _experiment_config(config, seed)
    os.makedirs(out, exist_ok=True)
    try:
        rows = harness.convergence_sweep(cfg, os.path.join(out, "sweep.csv"))
    except (ValueError, RuntimeError) as exc:
        raise click.ClickException(str(exc))
    axis = cfg.sweep["axis"]
    for value, mean, stderr in rows:
        click.echo(f"{axis}={value}: {mean:.6f} +- {stderr:.6f}")


@main.command("posterior-test")
@click.option("--config", default=None,
              help="JSON with any of: B, repeats, N, seed.")
@click.option("--seed", type=int, default=None, help="Override the seed.")
@click.option("--out", required=True, help="Directory for posterior.csv.")
@click.option("--threads", type=int, default=None, help="Compute-thread cap.")
def posterior_test(config, seed, out, threads) -> None:
    """One-shot multimodal Bayesian update scored by energy distance."""
    _apply_threads(threads)
    params = _small_config(config, {"B", "repeats", "N", "seed"},
                           "posterior-test config")
    if seed is not None:
        params["seed"] = seed
    os.makedirs(out, exist_ok=True)
    rows = harness.posterior_sample_test(
        **params, out_path=os.path.join(out, "posterior.csv"))
    methods = sorted({w["method"] for w in rows})
    for method in methods:
        vals = [w["energy_distance"] for w in rows if w["method"] == method]
        click.echo(f"{method}: mean energy distance {sum(vals)/len(vals):.6f} "
                   f"over {len(vals)} repeats")


@main.command("verify-identity")
@click.option("--config", default=None,
              help="JSON with any of: n_t, n_axis, lo, hi.")
@click.option("--seed", type=int, default=None,
              help="Accepted for interface parity; the check is deterministic.")
@click.option("--out", default=None, help="Directory for identity.json.")
@click.option("--threads", type=int, default=None, help="Compute-thread cap.")
def verify_identity(config, seed, out, threads) -> None:
    """Check the generation-drift/score identity; print a JSON report."""
    _apply_threads(threads)
    params = _small_config(config, {"n_t", "n_axis", "lo", "hi"},
                           "verify-identity config")
    report = harness.identity_report(**params)
    blob = json.dumps(report, indent=2, sort_keys=True)
    if out is not None:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "identity.json"), "w") as fh:
            fh.write(blob + "\n")
    click.echo(blob)


if __name__ == "__main__":
    main()
