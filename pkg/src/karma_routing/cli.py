"""Command-line entry point: ``karma-routing <command> --scenario ... --out ...``."""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import logging
import sys
from pathlib import Path

import click
import numpy as np

from .aggregate import steady_state_flows
from .best_response import attractive_bound, choice_landscape, feasibility_threshold
from .chain import build_chain
from .config import (Scenario, emit_csv, emit_json, load_scenario, read_text, sha256, stream_int,
                     stream_rng)
from .design import design_prices, integer_weights, satisfies_constraints
from .errors import ConvergenceError, KarmaRoutingError, ValidationError
from .optimum import solve_system_optimum
from .simulation import run_simulation

log = logging.getLogger("karma_routing")

EXIT_VALIDATION, EXIT_CONVERGENCE, EXIT_IO = 2, 3, 4


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, ConvergenceError):
        return EXIT_CONVERGENCE
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_VALIDATION


def _guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (KarmaRoutingError, OSError) as exc:
            click.echo(f"error: {exc}", err=True)
            for v in getattr(exc, "violations", []):
                click.echo(f"  - {v}", err=True)
            sys.exit(_exit_code(exc))
    return wrapper


def _parse_prices(text):
    if text is None:
        return None
    try:
        return np.array([int(v) for v in text.split(",")], dtype=np.int64)
    except ValueError as exc:
        raise ValidationError(f"--prices: expected comma-separated integers, got {text!r}") from exc


def _prices(sc: Scenario, text) -> np.ndarray:
    p = _parse_prices(text)
    if p is None:
        if sc.prices is None:
            raise ValidationError("no prices: pass --prices or set 'prices' in the scenario")
        p = np.array(sc.prices, dtype=np.int64)
    if p.size != sc.network.n:
        raise ValidationError(f"--prices: {p.size} values for n={sc.network.n} arcs")
    return p


def _optimum(sc: Scenario):
    o = sc.optimum
    return solve_system_optimum(sc.network, sc.population.p_go, tol=o.tol, max_iter=o.max_iter,
                                decimals=o.decimals)


common = [
    click.option("--scenario", default="five_arc_commuters", show_default=True,
                 help="Scenario YAML path or bundled name."),
    click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None,
                 help="Master seed; overrides the scenario seeds."),
    click.option("--out", type=click.Path(file_okay=False), default="out", show_default=True,
                 help="Output directory."),
]


def with_common(fn):
    for opt in reversed(common):
        fn = opt(fn)
    return fn


@click.group()
@click.option("-v", "--verbose", count=True, help="Log progress (repeat for debug).")
def main(verbose):
    """Karma-based routing: optimum, price design, steady state and simulation."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _do_optimum(sc, out: Path) -> dict:
    opt = _optimum(sc)
    data = opt.to_dict(sc.network)
    emit_json(data, out / "optimum.json")
    return {"result": opt, "files": [out / "optimum.json"]}


@main.command()
@with_common
@_guard
def optimum(scenario, seed, out):
    """System-optimal flows and their discomforts."""
    sc = load_scenario(scenario)
    res = _do_optimum(sc, Path(out))
    click.echo(" ".join(f"{v:.4f}" for v in res["result"].x_star))


def _do_design(sc, out: Path, seed, generations=None) -> dict:
    opt = _optimum(sc)
    changes = {}
    if seed is not None:
        changes["seed"] = stream_int(seed, "design")
    if generations is not None:
        changes["generations"] = generations
    cfg = dataclasses.replace(sc.design, **changes)
    res = design_prices(sc.network, opt.x_star, opt.x_star_quant, sc.population, cfg,
                        optimal_cost=opt.cost)
    data = res.to_dict()
    data["seed"] = int(cfg.seed)
    data["x_star_quant"] = [float(v) for v in opt.x_star_quant]
    data["constraints_ok"] = satisfies_constraints(res.p_star, integer_weights(opt.x_star_quant),
                                                   cfg.price_bound)
    emit_json(data, out / "design.json")
    return {"result": res, "files": [out / "design.json"], "seed": int(cfg.seed)}


@main.command()
@with_common
@click.option("--generations", type=click.IntRange(0), default=None, help="Override the GA budget.")
@_guard
def design(scenario, seed, out, generations):
    """Integer prices whose steady state matches the optimum."""
    sc = load_scenario(scenario)
    res = _do_design(sc, Path(out), seed, generations)["result"]
    click.echo(f"p* = {','.join(str(int(v)) for v in res.p_star)}  gap = {res.relative_subopt:.5f}")
    if not res.met_target:
        click.echo("warning: design budget exhausted before reaching subopt_stop", err=True)


def _do_simulate(sc, out: Path, p, seed, days=None, M=None) -> dict:
    opt = _optimum(sc)
    cfg = sc.sim
    days = cfg.days if days is None else days
    M = cfg.M if M is None else M
    if seed is None:
        rng = np.random.Generator(np.random.Philox(cfg.seed))
        used = cfg.seed
    else:
        rng = stream_rng(seed, "simulate")
        used = seed
    trace = run_simulation(sc.network, sc.population, p, opt.x_star, days, M=M,
                           karma_init=cfg.karma_init, rng=rng, max_sweeps=cfg.max_sweeps,
                           convention=cfg.convention, progress=True)
    emit_csv(trace, out / "sim_trace.csv")
    tail = slice(max(0, len(trace) - 50), len(trace))
    summary = {
        "prices": [int(v) for v in p],
        "days": int(days),
        "M": int(M),
        "seed": int(used),
        "convention": cfg.convention,
        "unconverged_days": int(sum(not c for c in trace.converged)),
    }
    if len(trace):
        flows = np.array(trace.flows)
        summary.update({
            "last50_rel_cost": float(np.mean(trace.rel_cost[tail])),
            "first10_rel_cost": float(np.mean(trace.rel_cost[:10])),
            "last50_flows": [float(v) for v in flows[tail].mean(axis=0)],
            "last50_dbar_interpreted": float(np.mean(trace.dbar_interpreted[tail])),
        })
    emit_json(summary, out / "sim_summary.json")
    return {"result": trace, "summary": summary,
            "files": [out / "sim_trace.csv", out / "sim_summary.json"]}


@main.command()
@with_common
@click.option("--prices", default=None, help="Comma-separated integer prices.")
@click.option("--days", type=click.IntRange(0), default=None)
@click.option("--M", "M", type=click.IntRange(1), default=None, help="Number of users.")
@_guard
def simulate(scenario, seed, out, prices, days, M):
    """Agent-based day-by-day simulation; writes the trace as CSV."""
    sc = load_scenario(scenario)
    res = _do_simulate(sc, Path(out), _prices(sc, prices), seed, days, M)
    s = res["summary"]
    if "last50_rel_cost" in s:
        click.echo(f"last-50-day gap {s['last50_rel_cost']:.5f}, unconverged days {s['unconverged_days']}")


@main.command()
@with_common
@click.option("--prices", default=None, help="Comma-separated integer prices.")
@_guard
def aggregate(scenario, seed, out, prices):
    """Steady-state flows of the Karma chains at the optimum."""
    sc = load_scenario(scenario)
    p = _prices(sc, prices)
    opt = _optimum(sc)
    agg = steady_state_flows(p, opt.x_star, sc.network, sc.population, method="direct")
    data = agg.to_dict()
    data["prices"] = [int(v) for v in p]
    data["optimal_cost"] = opt.cost
    data["relative_gap"] = (agg.cost - opt.cost) / opt.cost
    emit_json(data, Path(out) / "aggregate.json")
    click.echo(f"flows {' '.join(f'{v:.4f}' for v in agg.flows)}  gap {data['relative_gap']:.5f}")


@main.command()
@with_common
@click.option("--prices", default=None, help="Comma-separated integer prices.")
@click.option("--kref", type=click.IntRange(0), default=0, show_default=True)
@click.option("--k0", type=click.IntRange(0), default=None, help="Initial Karma (default: largest price).")
@_guard
def chain(scenario, seed, out, prices, kref, k0):
    """Karma chain of one reference level: stationary law and arc selection."""
    sc = load_scenario(scenario)
    p = _prices(sc, prices)
    opt = _optimum(sc)
    k0 = int(p.max()) if k0 is None else k0
    ch = build_chain(k0, kref, p, sc.network.discomfort(opt.x_star), sc.population)
    n = sc.network.n
    rows = ([int(k), ch.pi_inf[i]] + list(ch.P_sel[:, i]) for i, k in enumerate(ch.states))
    emit_csv(rows, Path(out) / "chain.csv", header=["k", "pi"] + [f"P_{j + 1}" for j in range(n)])
    data = {
        "k0": k0, "k_ref": kref, "prices": [int(v) for v in p], "states": int(ch.states.size),
        "column_sum_error": float(np.max(np.abs(np.asarray(ch.A.sum(axis=0)).ravel() - 1.0))),
        "residual": float(np.max(np.abs(ch.A @ ch.pi_inf - ch.pi_inf))),
        "attractive_bound": int(attractive_bound(kref, p, sc.population.horizon)),
        "arc_distribution": [float(v) for v in ch.P_sel @ ch.pi_inf],
    }
    emit_json(data, Path(out) / "chain.json")
    click.echo(f"{ch.states.size} states, residual {data['residual']:.2e}")


@main.command()
@with_common
@click.option("--prices", default=None, help="Comma-separated integer prices.")
@click.option("--kref", type=click.IntRange(0), default=0, show_default=True)
@click.option("--grid", type=click.IntRange(2), default=200, show_default=True)
@click.option("--k-max", type=click.IntRange(1), default=None, help="Largest Karma on the grid.")
@_guard
def landscape(scenario, seed, out, prices, kref, grid, k_max):
    """Optimal arc over a (Karma, urgency) grid at the optimum."""
    sc = load_scenario(scenario)
    p = _prices(sc, prices)
    opt = _optimum(sc)
    pop = sc.population
    T = pop.horizon
    k_lo = max(0, int(feasibility_threshold(kref, p, T)))
    k_hi = k_max if k_max is not None else int(attractive_bound(kref, p, T))
    ks = np.linspace(k_lo, k_hi, grid)
    ss = np.linspace(pop.sensitivity.low, pop.sensitivity.high, grid)
    arcs = choice_landscape(ks, ss, kref, p, sc.network.discomfort(opt.x_star), T, pop.sensitivity)
    rows = ([ks[i], ss[j], int(arcs[i, j]) + 1] for i in range(grid) for j in range(grid))
    emit_csv(rows, Path(out) / "landscape.csv", header=["k", "s", "arc"])
    click.echo(f"{grid}x{grid} grid written")


@main.command("run-all")
@with_common
@click.option("--days", type=click.IntRange(0), default=None)
@click.option("--generations", type=click.IntRange(0), default=None, help="Override the GA budget.")
@_guard
def run_all(scenario, seed, out, days, generations):
    """Optimum, price design and simulation with the designed prices, plus a manifest."""
    sc = load_scenario(scenario)
    out = Path(out)
    files = _do_optimum(sc, out)["files"]
    des = _do_design(sc, out, seed, generations)
    sim = _do_simulate(sc, out, des["result"].p_star, seed, days)
    files += des["files"] + sim["files"]
    manifest = {
        "scenario": str(scenario),
        "scenario_sha256": hashlib.sha256(read_text(scenario)[0].encode()).hexdigest(),
        "master_seed": seed,
        "seeds": {"design": des["seed"], "simulate": sim["summary"]["seed"]},
        "overrides": {"days": days, "generations": generations},
        "prices": [int(v) for v in des["result"].p_star],
        "outputs": {f.name: sha256(f) for f in files},
    }
    emit_json(manifest, out / "manifest.json")
    click.echo(f"wrote {len(files) + 1} files to {out}")


if __name__ == "__main__":
    main()
