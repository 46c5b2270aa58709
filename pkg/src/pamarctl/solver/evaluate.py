"""Closed-loop evaluation on held-out noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..basis import DecisionRule
from ..model import GenericProblem
from ..pamar import EnsembleStats, History, NoisePath, simulate_ensemble, simulate_path
from .offline import Solution, state_stats, violation_rates
from .rollout import align_initial_states
from .settings import SolverSettings
from .transient import solve_transient

__all__ = ["TransientPlan", "Evaluation", "rolling_evaluate", "continue_noise", "history_at"]


@dataclass(frozen=True)
class TransientPlan:
    """Re-solve a transient problem of ``horizon`` steps before every move."""

    settings: SolverSettings
    horizon: int = 2


@dataclass
class Evaluation:
    """Realised closed-loop statistics.

    ``welfare`` is the path-averaged negative loss per cycle.  ``end_means``
    holds the mean state at ``t = 0, T, 2T, ...``; ``drift`` is the largest
    relative change of those means across the ends of cycles ``1..cycles``,
    per state component.
    """

    states: np.ndarray  # (M, cycles*T + 1, nx)
    controls: np.ndarray  # (M, cycles*T, nu)
    losses: np.ndarray  # (M, cycles*T)
    welfare: list[float]
    stats: EnsembleStats
    violation_rate: list[float]
    end_means: np.ndarray
    drift: np.ndarray
    start: int = 0


def history_at(path: NoisePath, k: int, p: int, q: int) -> History:
    """Noise history just before step ``k`` of ``path`` (``p`` values, ``q`` innovations)."""
    vals = np.concatenate([np.asarray(path.history.values).reshape(-1, path.values.shape[1]),
                           path.values[:k]])
    inn = np.concatenate([np.asarray(path.history.innovations).reshape(-1, path.values.shape[1]),
                          path.innovations[:k]])
    return History(vals[vals.shape[0] - p:], inn[inn.shape[0] - q:])


def continue_noise(problem: GenericProblem, paths: list[NoisePath], length: int,
                   seed: int) -> list[NoisePath]:
    """Continue every path by ``length`` steps with fresh innovations."""
    noise = problem.noise
    out = []
    for m, path in enumerate(paths):
        h = history_at(path, len(path), noise.p, noise.q)
        out.append(simulate_path(noise, length, h, seed, start=path.start + len(path), stream=m))
    return out


def _relative_drift(end_means: np.ndarray, scale: np.ndarray) -> np.ndarray:
    ends = end_means[1:]
    ref = np.maximum(np.abs(ends), 1e-12 * scale)
    spread = ends[:, None, :] - ends[None, :, :]
    return np.max(np.abs(spread) / ref[None, :, :], axis=(0, 1))


def rolling_evaluate(
    problem: GenericProblem,
    offline: Solution | None,
    cycles: int,
    *,
    paths: int = 200,
    seed: int = 1,
    transient: TransientPlan | None = None,
    initial_states: np.ndarray | None = None,
    rule: DecisionRule | None = None,
    noise: list[NoisePath] | None = None,
    burn_in_cycles: int = 3,
) -> Evaluation:
    """Run the closed loop for ``cycles`` master periods on fresh noise.

    Without ``transient`` the offline rule (or ``rule``) is applied directly.
    With it, every path re-solves a transient problem from its current state
    and realised noise history at every step and applies the first control.
    ``initial_states`` default to a resample (seeded) of the offline initial
    ensemble, or the problem anchor when no offline solution is given;
    noise-echo components are then set from each path's history.
    """
    if cycles < 1:
        raise ValueError("cycles must be >= 1")
    if rule is None:
        if offline is None:
            raise ValueError("need an offline solution or an explicit rule")
        rule = offline.rule
    if transient is not None and offline is None:
        raise ValueError("transient re-solves need the offline solution")
    T = problem.period
    L = cycles * T
    if noise is None:
        noise = simulate_ensemble(problem.noise, paths, L, burn_in_cycles, seed)
    M = len(noise)
    W = np.stack([p.values for p in noise])
    if W.shape[1] < L:
        raise ValueError(f"noise paths cover {W.shape[1]} steps, need {L}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2**31,)))
    if initial_states is None:
        if offline is not None:
            pool = offline.initial_ensemble
            X0 = pool[rng.integers(0, pool.shape[0], size=M)]
        else:
            X0 = np.repeat(problem.initial_state[None], M, axis=0)
    else:
        X0 = np.asarray(initial_states, dtype=float)
        if X0.ndim == 1:
            X0 = np.repeat(X0[None], M, axis=0)
    X0 = align_initial_states(problem, X0, noise)
    start = noise[0].start
    X = np.empty((M, L + 1, problem.state_dim))
    U = np.empty((M, L, problem.control_dim))
    losses = np.empty((M, L))
    X[:, 0] = X0
    for k in range(L):
        t = start + k
        if transient is None:
            U[:, k] = rule.controls(t, X[:, k])[0]
        else:
            t_check = t + min(transient.horizon, T)
            for m in range(M):
                h = history_at(noise[m], k, problem.noise.p, problem.noise.q)
                ts = solve_transient(problem, offline, t, X[m, k], h, t_check,
                                     transient.settings.replace(seed=seed + k))
                U[m, k] = ts.first_control
        losses[:, k] = problem.stage_loss.value(t, X[:, k], W[:, k], U[:, k])
        X[:, k + 1] = problem.dynamics.step_batch(t + 1, X[:, k], U[:, k], W[:, k])

    welfare = [float(-losses[:, c * T:(c + 1) * T].sum(axis=1).mean()) for c in range(cycles)]
    end_means = X[:, ::T].mean(axis=0)
    return Evaluation(
        states=X,
        controls=U,
        losses=losses,
        welfare=welfare,
        stats=state_stats(X[:, :L], T, start),
        violation_rate=violation_rates(problem, X),
        end_means=end_means,
        drift=_relative_drift(end_means, problem.state_scale),
        start=start,
    )
