"""Command line interface: solve, verify and compare.

Exit codes: 0 on success, 1 on a failed computation, 2 on bad usage or an
invalid configuration.
"""

from __future__ import annotations

import sys

import click
import numpy as np

from .analysis import round_distances
from .config import load_config
from .environments import (SequentialSales, SplitAward,
                           analytical_sequential_sales, analytical_split_award)
from .game import ContractViolation
from .serialize import (config_hash, load_checkpoint, save_checkpoint,
                        save_report, save_trace)
from .solver import run_search
from .verifier import epsilon_bound


def _fail_usage(exc):
    click.echo(f"error: {exc}", err=True)
    sys.exit(2)


@click.group()
def main():
    """Equilibrium search and verification for sequential auctions."""


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False))
@click.option("--quiet", is_flag=True)
def solve(config_path, out_path, trace_path, quiet):
    """Run the search and write a strategy checkpoint."""
    try:
        cfg = load_config(config_path)
    except ContractViolation as exc:
        _fail_usage(exc)

    def progress(row):
        if not quiet:
            click.echo(f"iter {row['iteration']:3d} [{row['phase']}] "
                       f"max_loss={row['max_loss']:.5f} "
                       f"classes={row['n_classes']} ({row['seconds']:.1f}s)")

    try:
        result = run_search(cfg.env, cfg.solver, progress=progress)
        header = {"config_hash": config_hash(cfg.raw, cfg.solver),
                  "seed": cfg.solver.seed}
        save_checkpoint(out_path, result.profile, result.index, cfg.env, header)
        if trace_path:
            save_trace(trace_path, result.trace)
    except Exception as exc:  # noqa: BLE001 - report and signal failure
        click.echo(f"solve failed: {exc}", err=True)
        sys.exit(1)
    click.echo(f"wrote {out_path}")


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint", "ckpt_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--report", "report_path", type=click.Path(dir_okay=False))
def verify(config_path, ckpt_path, report_path):
    """Compute the exploitability upper bound of a checkpointed profile."""
    try:
        cfg = load_config(config_path)
    except ContractViolation as exc:
        _fail_usage(exc)
    try:
        profile, index = load_checkpoint(ckpt_path, cfg.env, cfg.solver.grid_cells)
        report = epsilon_bound(cfg.env, profile, cfg.verifier, index=index)
        click.echo(f"epsilon_bound={report.epsilon:.6f} "
                   f"(exact={report.exact}, classes={report.n_classes})")
        for i, e in enumerate(report.per_bidder):
            click.echo(f"  bidder {i}: {e:.6f}")
        if report_path:
            save_report(report_path, report,
                        {"config_hash": config_hash(cfg.raw, cfg.verifier),
                         "checkpoint": str(ckpt_path)})
    except ContractViolation as exc:
        _fail_usage(exc)
    except Exception as exc:  # noqa: BLE001
        click.echo(f"verify failed: {exc}", err=True)
        sys.exit(1)


def _builtin_oracles(env):
    if isinstance(env, SequentialSales):
        return {(t, True): {0: (lambda th, t=t: analytical_sequential_sales(
            th, t + 1, env.n_bidders, env.k_goods, env.payment_rule))}
            for t in range(env.n_rounds)}
    if isinstance(env, SplitAward):
        return {
            (0, "start"): {0: lambda th: analytical_split_award(th, "round1", env)},
            (1, "winner"): {0: lambda th: analytical_split_award(th, "round2_winner", env)},
            (1, "loser"): {0: lambda th: analytical_split_award(th, "round2_loser", env)},
        }
    raise ContractViolation("no analytical oracle for this environment")


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint", "ckpt_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--sims", default=20000, show_default=True)
def compare(config_path, ckpt_path, sims):
    """L2 distances of a checkpointed profile from the analytical equilibrium."""
    try:
        cfg = load_config(config_path)
        oracles = _builtin_oracles(cfg.env)
    except ContractViolation as exc:
        _fail_usage(exc)
    try:
        profile, index = load_checkpoint(ckpt_path, cfg.env, cfg.solver.grid_cells)
        dists = round_distances(cfg.env, profile, index, oracles, n_sims=sims,
                                seed=cfg.solver.seed)
        for (t, role, bundle), d in sorted(dists.items(), key=repr):
            click.echo(f"round {t + 1} role={role} bundle={bundle}: L2={d:.4f}")
    except ContractViolation as exc:
        _fail_usage(exc)
    except Exception as exc:  # noqa: BLE001
        click.echo(f"compare failed: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
