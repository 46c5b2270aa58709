"""``pamarctl`` command line.

Exit codes: 0 ok, 2 config error, 3 solver nonconvergence, 4 divergence,
5 missing input.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from ..config import ConfigError, RunConfig, dump_config, load_config
from ..io import (
    SolutionFileError,
    config_hash,
    dumps,
    read_solution,
    write_manifest,
    write_solution,
    write_trajectories,
)
from ..model import build_problem
from ..pamar import (
    History,
    periodic_moments,
    simulate_ensemble,
    stationary_history,
    write_ensemble_csv,
)
from ..solver.evaluate import TransientPlan, rolling_evaluate
from ..solver.offline import solve_offline
from ..solver.rollout import rollout
from ..solver.settings import DivergenceError, SolverError, SolverSettings
from ..solver.transient import solve_transient
from ..solver.tree import solve_tree_baseline

log = logging.getLogger("pamarctl")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONCONVERGED = 3
EXIT_DIVERGED = 4
EXIT_MISSING = 5


class MissingInput(Exception):
    pass


class _Run:
    """Shared state of one invocation: resolved config, output dir, written files."""

    def __init__(self, args: argparse.Namespace):
        overrides = list(args.override or [])
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        self.cfg: RunConfig = load_config(args.config, overrides)
        self.config_text = dump_config(self.cfg)
        self.sha = config_hash(self.config_text)
        self.out = Path(args.out or self.cfg.output_dir)
        self.outputs: list[str] = []
        self.extra: dict = {}

    def path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs.append(name)
        return self.out / name

    def settings(self) -> SolverSettings:
        return SolverSettings.from_section(self.cfg.solver, self.cfg.seed)


def _solution_path(args) -> Path:
    if not args.solution:
        raise MissingInput(f"{args.command} needs --solution <file> from solve-offline")
    p = Path(args.solution)
    if not p.is_file():
        raise MissingInput(f"solution file {p} not found")
    return p


def cmd_solve_offline(run: _Run, args) -> int:
    problem = build_problem(run.cfg)
    sol = solve_offline(problem, run.settings())
    write_solution(run.path("solution.json"), sol, run.sha)
    traj = rollout(sol.instance, sol.rule)
    with open(run.path("trajectories.csv"), "w") as fh:
        write_trajectories(fh, traj.states, traj.controls, traj.losses, traj.start)
    d = sol.diagnostics
    print(f"objective {sol.objective:.10g}  wrap_gap {d['wrap_gap']:.3g}  rounds {d['rounds']}  "
          f"status {d['status']}")
    if not sol.converged:
        print("solver did not converge within picard_rounds", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_solve_transient(run: _Run, args) -> int:
    path = _solution_path(args)
    problem = build_problem(run.cfg)
    offline = read_solution(path, problem)
    tr = run.cfg.transient
    if tr is None:
        raise ConfigError("solve-transient needs a 'transient' section in the config")
    noise = problem.noise
    values = np.array(tr.observed_values, dtype=float).reshape(-1, noise.dim)
    innov = np.array(tr.observed_innovations, dtype=float).reshape(-1, noise.dim)
    # pad with the periodic mean orbit when fewer observations are given
    base = stationary_history(noise)
    if values.shape[0] < noise.p:
        values = np.concatenate([base.values, values])[values.shape[0]:]
    if innov.shape[0] < noise.q:
        innov = np.concatenate([base.innovations, innov])[innov.shape[0]:]
    settings = run.settings().replace(scenarios=tr.scenarios)
    try:
        res = solve_transient(problem, offline, tr.t_bar, tr.observed_state,
                              History(values, innov), tr.t_check, settings)
    except ValueError as exc:
        raise ConfigError(f"transient: {exc}") from None
    record = {
        "format": "pamarctl-transient",
        "version": 1,
        "config_sha256": run.sha,
        "t_bar": tr.t_bar,
        "t_check": tr.t_check,
        "first_control": res.first_control,
        "objective": res.objective,
        "intercepts": res.rule.intercepts,
        "gains": res.rule.gains,
        "diagnostics": res.diagnostics,
    }
    run.path("transient.json").write_text(dumps(record))
    print("first control " + " ".join(f"{v:.10g}" for v in res.first_control))
    return EXIT_OK


def cmd_evaluate(run: _Run, args) -> int:
    path = _solution_path(args)
    problem = build_problem(run.cfg)
    offline = read_solution(path, problem)
    ev_cfg = run.cfg.evaluate
    seed = ev_cfg.seed if ev_cfg.seed is not None else run.cfg.seed + 1
    plan = None
    if ev_cfg.use_transient:
        plan = TransientPlan(run.settings().replace(scenarios=ev_cfg.transient_scenarios),
                             ev_cfg.transient_horizon)
    ev = rolling_evaluate(problem, offline, ev_cfg.cycles, paths=ev_cfg.paths, seed=seed,
                          transient=plan, burn_in_cycles=run.cfg.solver.burn_in_cycles)
    record = {
        "format": "pamarctl-evaluation",
        "version": 1,
        "config_sha256": run.sha,
        "seed": seed,
        "cycles": ev_cfg.cycles,
        "paths": ev_cfg.paths,
        "welfare_per_cycle": ev.welfare,
        "violation_rate": ev.violation_rate,
        "end_of_cycle_means": ev.end_means,
        "drift": ev.drift,
        "phase_mean": ev.stats.mean,
        "phase_cov": ev.stats.cov,
    }
    run.path("evaluation.json").write_text(dumps(record))
    with open(run.path("trajectories.csv"), "w") as fh:
        write_trajectories(fh, ev.states, ev.controls, ev.losses, ev.start)
    print("welfare per cycle " + " ".join(f"{w:.6g}" for w in ev.welfare))
    print(f"max violation rate {max(ev.violation_rate):.4g}")
    return EXIT_OK


def cmd_baseline(run: _Run, args) -> int:
    problem = build_problem(run.cfg)
    b = run.cfg.baseline
    tree = solve_tree_baseline(problem, b.branching, b.depth, b.grid_points, seed=run.cfg.seed)
    settings = run.settings().replace(wrap_weight=0.0, picard_rounds=1)
    affine = None
    if b.depth == problem.period:
        sol = solve_offline(problem, settings, scenarios=tree.leaf_paths)
        affine = sol.breakdown.risk
    record = {
        "format": "pamarctl-baseline",
        "version": 1,
        "config_sha256": run.sha,
        "branching": b.branching,
        "depth": b.depth,
        "grid_points": b.grid_points,
        "tree_objective": tree.objective,
        "first_control": tree.first_control,
        "nodes": tree.nodes,
        "affine_objective_on_tree": affine,
    }
    run.path("baseline.json").write_text(dumps(record))
    print(f"tree objective {tree.objective:.10g}")
    if affine is not None:
        print(f"affine rule on the same tree {affine:.10g}")
    return EXIT_OK


def cmd_simulate_noise(run: _Run, args) -> int:
    cfg = run.cfg
    problem = build_problem(cfg)
    sim = cfg.simulate
    paths = simulate_ensemble(problem.noise, sim.paths, sim.cycles * problem.period,
                              sim.burn_in_cycles, cfg.seed)
    with open(run.path("noise.csv"), "w") as fh:
        write_ensemble_csv(paths, fh)
    st = periodic_moments(paths, problem.calendar)
    run.path("noise_moments.json").write_text(dumps({
        "format": "pamarctl-noise-moments", "version": 1, "config_sha256": run.sha,
        "mean": st.mean, "cov": st.cov, "counts": st.counts,
    }))
    print(f"wrote {sim.paths} paths of {sim.cycles * problem.period} steps")
    return EXIT_OK


COMMANDS = {
    "solve-offline": cmd_solve_offline,
    "solve-transient": cmd_solve_transient,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
    "simulate-noise": cmd_simulate_noise,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pamarctl",
        description="Risk-averse periodic control with PAMAR noise.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (default: config output_dir)")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="dotted config override, repeatable")
        if name in ("solve-transient", "evaluate"):
            p.add_argument("--solution", help="solution file written by solve-offline")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    run = None
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError(f"--seed must lie in [0, 2^64), got {args.seed}")
        run = _Run(args)
        code = COMMANDS[args.command](run, args)
    except (FileNotFoundError, MissingInput, SolutionFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_MISSING
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        code = EXIT_DIVERGED
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        code = EXIT_DIVERGED
    if run is not None:
        write_manifest(run.path("manifest.json"), command=args.command,
                       config_text=run.config_text, seed=run.cfg.seed,
                       outputs=[o for o in run.outputs if o != "manifest.json"],
                       wall_time=time.perf_counter() - t0, exit_code=code,
                       extra={"argv": sys.argv[1:] if argv is None else list(argv)})
    return code


if __name__ == "__main__":
    sys.exit(main())
