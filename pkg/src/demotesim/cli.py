"""Command-line entry point.

    demotesim <experiment> [--config F] [--seed S] [--out DIR] [--format json|csv]

plus grouped forms (``evset build``, ``attack covert``, ``taxonomy eval`` and
so on). Every command writes a JSON report and CSV sidecars to the output
directory and prints the summary in the chosen format. The exit code is 0
only if every embedded check of the experiment passed.
"""

from __future__ import annotations

import sys

import click

from . import harness
from .config import ConfigError
from .primitives import ProbeKind

KINDS = [k.value for k in ProbeKind if k is not ProbeKind.DemoteTime]


def common(f):
    f = click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json",
                     help="Summary format printed to stdout.")(f)
    f = click.option("--out", "out", type=click.Path(file_okay=False), default=None,
                     help=f"Output directory (default ${harness.OUT_ENV} or "
                          f"./{harness.DEFAULT_OUT}).")(f)
    f = click.option("--seed", type=int, default=None, help="Global seed.")(f)
    f = click.option("--config", "config", type=click.Path(exists=True, dir_okay=False),
                     default=None, help="Config file (dotted key = value, or JSON).")(f)
    return f


def _go(experiment, config, seed, out, fmt, **params):
    params = {k: v for k, v in params.items() if v is not None}
    try:
        rep = harness.run(experiment, config, seed, out_dir=harness.resolve_out_dir(out),
                          **params)
    except ConfigError as exc:
        raise click.ClickException(f"config: {exc}") from exc
    except harness.ExperimentError as exc:
        raise click.ClickException(str(exc)) from exc
    if fmt == "json":
        click.echo(rep.body_json())
    else:
        click.echo(rep.metrics_csv(), nl=False)
    failed = [k for k, v in rep.checks.items() if not v]
    for k in failed:
        click.echo(f"FAILED check: {k}", err=True)
    sys.exit(0 if not failed else 1)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(package_name="artifact", prog_name="demotesim")
def main():
    """Cache-line demotion simulator and attack laboratory."""


# -- flat experiment commands ------------------------------------------------


@main.command("bench")
@common
@click.option("--kind", "kinds", type=click.Choice(KINDS), multiple=True)
@click.option("--samples", type=int, default=None)
def bench_cmd(config, seed, out, fmt, kinds, samples):
    """Hit/miss timing of the probe primitives."""
    _go("bench", config, seed, out, fmt, kinds=tuple(kinds) or None, samples=samples)


@main.command("algorithm1")
@common
@click.option("--kind", "kinds", type=click.Choice(KINDS), multiple=True)
@click.option("--iterations", type=int, default=None)
@click.option("--victim-core", type=int, default=None)
def algorithm1_cmd(config, seed, out, fmt, kinds, iterations, victim_core):
    """Attacker/victim loop with alternating victim accesses."""
    _go("algorithm1", config, seed, out, fmt, kinds=tuple(kinds) or None,
        iterations=iterations, victim_core=victim_core)


@main.command("demote-time")
@common
@click.option("--state-samples", type=int, default=None)
@click.option("--table-samples", type=int, default=None)
@click.option("--counter-ops", type=int, default=None)
@click.option("--adversarial-ops", type=int, default=None)
def demote_time_cmd(config, seed, out, fmt, **kw):
    """CLDEMOTE latency by line state and page bits, walk counters, fault freedom."""
    _go("demote-time", config, seed, out, fmt, **kw)


@main.command("page-levels")
@common
@click.option("--samples", type=int, default=None)
def page_levels_cmd(config, seed, out, fmt, samples):
    """Latency by page-walk abort level."""
    _go("page-levels", config, seed, out, fmt, samples=samples)


def _covert_options(f):
    f = click.option("--sweep", type=str, default=None,
                     help="Window sweep as start:stop:step (stop exclusive).")(f)
    f = click.option("--sweep-bits", type=int, default=None)(f)
    f = click.option("--primitive", type=click.Choice(KINDS), default=None)(f)
    f = click.option("--bits", type=int, default=None)(f)
    f = click.option("--window", type=int, default=None)(f)
    return f


def _sweep(text):
    if not text:
        return None
    try:
        a, b, c = (int(x) for x in text.split(":"))
    except ValueError:
        raise click.BadParameter("expected start:stop:step", param_hint="--sweep") from None
    return list(range(a, b, c))


@main.command("covert")
@common
@_covert_options
def covert_cmd(config, seed, out, fmt, window, bits, primitive, sweep_bits, sweep):
    """Window-based covert channel."""
    _go("covert", config, seed, out, fmt, window=window, bits=bits, primitive=primitive,
        sweep=_sweep(sweep), sweep_bits=sweep_bits)


def _kaslr_options(f):
    f = click.option("--repeats", type=int, default=None)(f)
    f = click.option("--reboots", type=int, default=None)(f)
    f = click.option("--trials", type=int, default=None)(f)
    return f


@main.command("kaslr")
@common
@_kaslr_options
def kaslr_cmd(config, seed, out, fmt, trials, reboots, repeats):
    """Kernel base recovery by slot scan."""
    _go("kaslr", config, seed, out, fmt, trials=trials, reboots=reboots, repeats=repeats)


def _reverse_options(f):
    f = click.option("--run-samples", type=int, default=None)(f)
    f = click.option("--runs", type=int, default=None)(f)
    f = click.option("--samples", type=int, default=None)(f)
    f = click.option("--max-n", type=int, default=None)(f)
    return f


@main.command("reverse-llc")
@common
@_reverse_options
def reverse_llc_cmd(config, seed, out, fmt, **kw):
    """Same-core prime-and-time curve."""
    _go("reverse-llc", config, seed, out, fmt, **kw)


@main.command("reverse-dir")
@common
@_reverse_options
def reverse_dir_cmd(config, seed, out, fmt, **kw):
    """Cross-core prime-and-time curve."""
    _go("reverse-dir", config, seed, out, fmt, **kw)


# -- grouped forms -------------------------------------------------------------


@main.group("evset", invoke_without_command=True)
@common
@click.option("--runs", type=int, default=None)
@click.pass_context
def evset_group(ctx, config, seed, out, fmt, runs):
    """Eviction-set construction (both placements when run bare)."""
    if ctx.invoked_subcommand is None:
        _go("evset", config, seed, out, fmt, runs=runs)


@evset_group.command("build")
@common
@click.option("--placement", type=click.Choice(["helper", "demote", "cldemote"]),
              multiple=True)
@click.option("--runs", type=int, default=None)
def evset_build(config, seed, out, fmt, placement, runs):
    """Build LLC eviction sets over seeded runs."""
    _go("evset", config, seed, out, fmt, runs=runs, placements=tuple(placement) or None)


@evset_group.command("reverse-llc")
@common
@_reverse_options
def evset_reverse_llc(config, seed, out, fmt, **kw):
    """Same as ``demotesim reverse-llc``."""
    _go("reverse-llc", config, seed, out, fmt, **kw)


@evset_group.command("reverse-dir")
@common
@_reverse_options
def evset_reverse_dir(config, seed, out, fmt, **kw):
    """Same as ``demotesim reverse-dir``."""
    _go("reverse-dir", config, seed, out, fmt, **kw)


@main.group("attack")
def attack_group():
    """End-to-end attacks."""


@attack_group.command("covert")
@common
@_covert_options
def attack_covert(config, seed, out, fmt, window, bits, primitive, sweep_bits, sweep):
    """Same as ``demotesim covert``."""
    _go("covert", config, seed, out, fmt, window=window, bits=bits, primitive=primitive,
        sweep=_sweep(sweep), sweep_bits=sweep_bits)


@attack_group.command("kaslr")
@common
@_kaslr_options
def attack_kaslr(config, seed, out, fmt, trials, reboots, repeats):
    """Same as ``demotesim kaslr``."""
    _go("kaslr", config, seed, out, fmt, trials=trials, reboots=reboots, repeats=repeats)


@main.group("primitives")
def primitives_group():
    """Probe primitives."""


@primitives_group.command("bench")
@common
@click.option("--kind", "kinds", type=click.Choice(KINDS), multiple=True)
@click.option("--samples", type=int, default=None)
def primitives_bench(config, seed, out, fmt, kinds, samples):
    """Same as ``demotesim bench``."""
    _go("bench", config, seed, out, fmt, kinds=tuple(kinds) or None, samples=samples)


@main.group("taxonomy", invoke_without_command=True)
@common
@click.pass_context
def taxonomy_group(ctx, config, seed, out, fmt):
    """Attack feasibility from instruction characteristics."""
    if ctx.invoked_subcommand is None:
        _go("taxonomy", config, seed, out, fmt)


@taxonomy_group.command("check")
@common
def taxonomy_check(config, seed, out, fmt):
    """Evaluate every knowledge-base row against its expected marks."""
    _go("taxonomy", config, seed, out, fmt)


@taxonomy_group.command("eval")
@common
@click.option("--profile", required=True,
              help="Characteristics present, e.g. U,I,S, or five 0/1 flags in U,I,M,D,S order.")
def taxonomy_eval(config, seed, out, fmt, profile):
    """Feasible attacks for one profile."""
    try:
        from .taxonomy import ExtensionProfile
        ExtensionProfile.parse(profile)
    except ValueError as exc:
        raise click.BadParameter(str(exc), param_hint="--profile") from exc
    _go("taxonomy", config, seed, out, fmt, profile=profile)


if __name__ == "__main__":  # pragma: no cover
    main()
