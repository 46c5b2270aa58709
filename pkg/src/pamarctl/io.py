"""Solution files, trajectory dumps and run manifests.

Solution files are JSON with sorted keys and shortest round-trip float
formatting, so identical inputs give byte-identical files.  Nothing
time-dependent goes into a solution file; wall time lives in the manifest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
from pathlib import Path
from typing import IO, Any

import numpy as np

from . import __version__
from .basis import DecisionRule, build_basis
from .model import GenericProblem
from .pamar import EnsembleStats
from .solver.offline import Solution
from .solver.rollout import Breakdown

__all__ = [
    "SOLUTION_FORMAT",
    "SOLUTION_VERSION",
    "SolutionFileError",
    "solution_to_dict",
    "solution_from_dict",
    "write_solution",
    "read_solution",
    "dumps",
    "write_trajectories",
    "config_hash",
    "write_manifest",
]

SOLUTION_FORMAT = "pamarctl-solution"
SOLUTION_VERSION = 1


class SolutionFileError(ValueError):
    """Solution file is unreadable, of the wrong version or inconsistent with the problem."""


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else None
    return obj


def dumps(obj: Any) -> str:
    """Canonical JSON text: sorted keys, no NaN, trailing newline."""
    return json.dumps(_plain(obj), sort_keys=True, indent=1, allow_nan=False) + "\n"


def config_hash(config_text: str) -> str:
    return hashlib.sha256(config_text.encode()).hexdigest()


def solution_to_dict(solution: Solution, config_sha256: str | None = None) -> dict:
    pb = solution.problem
    rule = solution.rule
    bd = solution.breakdown
    return {
        "format": SOLUTION_FORMAT,
        "version": SOLUTION_VERSION,
        "package_version": __version__,
        "config_sha256": config_sha256,
        "problem": {
            "kind": pb.kind,
            "state_dim": pb.state_dim,
            "control_dim": pb.control_dim,
            "state_scale": pb.state_scale,
            "info": pb.info,
        },
        "calendar": {"periods": list(pb.calendar.periods)},
        "basis": rule.basis.spec(),
        "rule": {
            "intercepts": rule.intercepts,
            "gains": rule.gains,
            "lower": rule.lower,
            "upper": rule.upper,
        },
        "objective": solution.objective,
        "breakdown": {
            "objective": bd.objective,
            "risk": bd.risk,
            "chance": bd.chance,
            "terminal": bd.terminal,
            "risk_terms": list(bd.risk_terms),
            "chance_terms": list(bd.chance_terms),
            "gap": bd.gap,
        },
        "initial_ensemble": solution.initial_ensemble,
        "terminal_ensemble": solution.terminal_ensemble,
        "phase_stats": {
            "mean": solution.stats.mean,
            "cov": solution.stats.cov,
            "counts": solution.stats.counts,
        },
        "diagnostics": solution.diagnostics,
    }


def solution_from_dict(data: dict, problem: GenericProblem) -> Solution:
    """Rebuild a :class:`Solution` (without scenarios) against ``problem``."""
    if data.get("format") != SOLUTION_FORMAT:
        raise SolutionFileError("not a pamarctl solution file")
    if data.get("version") != SOLUTION_VERSION:
        raise SolutionFileError(
            f"solution file version {data.get('version')} is not supported "
            f"(expected {SOLUTION_VERSION})"
        )
    try:
        periods = tuple(data["calendar"]["periods"])
        if periods != problem.calendar.periods:
            raise SolutionFileError(
                f"solution calendar {periods} does not match the problem {problem.calendar.periods}"
            )
        spec = data["basis"]
        if spec.get("type") != "periodic":
            raise SolutionFileError("only periodic-basis solutions can be loaded")
        basis = build_basis(problem.calendar, spec["harmonics"])
        r = data["rule"]
        rule = DecisionRule(basis, np.array(r["intercepts"], dtype=float),
                            np.array(r["gains"], dtype=float).reshape(
                                basis.n_atoms, problem.control_dim, problem.state_dim),
                            np.array(r["lower"], dtype=float), np.array(r["upper"], dtype=float))
        b = data["breakdown"]
        bd = Breakdown(b["objective"], b["risk"], b["chance"], b["terminal"],
                       tuple(b["risk_terms"]), tuple(b["chance_terms"]), b["gap"])
        st = data["phase_stats"]
        counts = np.array(st["counts"], dtype=int)
        stats = EnsembleStats(np.array(st["mean"], dtype=float), np.array(st["cov"], dtype=float),
                              int(counts.sum()), counts)
        X0 = np.array(data["initial_ensemble"], dtype=float).reshape(-1, problem.state_dim)
        XT = np.array(data["terminal_ensemble"], dtype=float).reshape(-1, problem.state_dim)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SolutionFileError):
            raise
        raise SolutionFileError(f"malformed solution file: {exc}") from None
    if rule.control_dim != problem.control_dim:
        raise SolutionFileError("solution control dimension does not match the problem")
    return Solution(rule=rule, problem=problem, objective=float(data["objective"]),
                    breakdown=bd, initial_ensemble=X0, terminal_ensemble=XT, stats=stats,
                    diagnostics=data.get("diagnostics", {}))


def write_solution(path: str | Path, solution: Solution, config_sha256: str | None = None) -> None:
    Path(path).write_text(dumps(solution_to_dict(solution, config_sha256)))


def read_solution(path: str | Path, problem: GenericProblem) -> Solution:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SolutionFileError(f"{path}: not valid JSON ({exc})") from None
    return solution_from_dict(data, problem)


def write_trajectories(fh: IO[str], states: np.ndarray, controls: np.ndarray,
                       losses: np.ndarray, start: int = 0) -> None:
    """CSV with columns ``path_id, t, x_0.., u_0.., loss``.

    One row per path and step; the final state gets a row with empty control
    and loss fields.
    """
    M, L1, nx = states.shape
    nu = controls.shape[2]
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["path_id", "t"] + [f"x_{i}" for i in range(nx)]
               + [f"u_{j}" for j in range(nu)] + ["loss"])
    for m in range(M):
        for k in range(L1):
            row = [m, start + k] + [repr(float(v)) for v in states[m, k]]
            if k < L1 - 1:
                row += [repr(float(v)) for v in controls[m, k]] + [repr(float(losses[m, k]))]
            else:
                row += [""] * (nu + 1)
            w.writerow(row)


def _versions() -> dict:
    import pydantic
    import yaml

    return {"pamarctl": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "pydantic": pydantic.VERSION, "pyyaml": yaml.__version__}


def write_manifest(path: str | Path, *, command: str, config_text: str, seed: int,
                   outputs: list[str], wall_time: float, exit_code: int,
                   extra: dict | None = None) -> None:
    """Run record: command, the resolved config itself, its hash, seed and versions.

    The embedded config is the fully resolved one (overrides applied), so a
    run can be repeated from the manifest alone.
    """
    record = {
        "command": command,
        "config": config_text,
        "config_sha256": config_hash(config_text),
        "seed": seed,
        "versions": _versions(),
        "outputs": sorted(outputs),
        "wall_time_seconds": wall_time,
        "exit_code": exit_code,
    }
    if extra:
        record.update(extra)
    Path(path).write_text(dumps(record))
