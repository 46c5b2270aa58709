"""Offline full-period solver: SAA + periodic rule + Picard wrap-around loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..basis import DecisionRule, PeriodicBasis, build_basis
from ..model import GenericProblem
from ..pamar import EnsembleStats, NoisePath, simulate_ensemble
from ..risk import violation_rate
from .rollout import (
    Breakdown,
    SaaInstance,
    Trajectories,
    align_initial_states,
    objective_and_gradient,
    objective_breakdown,
    rollout,
    scaled_moments,
)
from .settings import DivergenceError, SolverSettings

__all__ = [
    "OptimizeResult",
    "Solution",
    "optimize_rule",
    "solve_offline",
    "state_stats",
    "violation_rates",
]

log = logging.getLogger(__name__)


@dataclass
class OptimizeResult:
    rule: DecisionRule
    objective: float
    trace: list[float]
    iterations: int
    status: str


class _Normaliser:
    """Affine map between solver variables and rule coefficients.

    Solver variables are gains per scaled state deviation from ``center`` and
    intercepts in units of control-box width.
    """

    def __init__(self, rule: DecisionRule, center: np.ndarray, scale: np.ndarray):
        width = rule.upper - rule.lower
        self.w = np.where(np.isfinite(width) & (width > 0), width, 1.0)
        self.c = center
        self.s = scale
        self.rule = rule

    def to_rule(self, z: np.ndarray) -> DecisionRule:
        n, nu, nx = self.rule.gains.shape
        kt = z[: n * nu].reshape(n, nu)
        Kt = z[n * nu:].reshape(n, nu, nx)
        K = self.w[None, :, None] * Kt / self.s[None, None, :]
        k = self.w[None, :] * kt - K @ self.c
        return self.rule.with_coefficients(k, K)

    def from_rule(self, rule: DecisionRule) -> np.ndarray:
        K, k = rule.gains, rule.intercepts
        Kt = K * self.s[None, None, :] / self.w[None, :, None]
        kt = (k + K @ self.c) / self.w[None, :]
        return np.concatenate([kt.ravel(), Kt.ravel()])

    def grad(self, gk: np.ndarray, gK: np.ndarray) -> np.ndarray:
        gkt = gk * self.w[None, :]
        gKt = self.w[None, :, None] * (gK - gk[:, :, None] * self.c[None, None, :]) / self.s[None, None, :]
        return np.concatenate([gkt.ravel(), gKt.ravel()])


def optimize_rule(instance: SaaInstance, rule: DecisionRule, settings: SolverSettings,
                  center: np.ndarray | None = None) -> OptimizeResult:
    """Projected subgradient descent with step-halving acceptance.

    Each step moves the normalised coefficients a distance ``step`` along the
    negative unit subgradient.  A step is accepted only when it does not
    increase the objective; accepted steps grow the step size by
    ``settings.growth``, rejected ones shrink it by ``settings.decay``.
    Coefficients are projected onto the box ``[-coef_bound, coef_bound]`` in
    normalised units.  Because the direction is normalised, scaling every
    loss by a power of two leaves the iterates unchanged.

    The subgradient passes nothing through saturated controls.  When it
    vanishes or admits no acceptable step, the direction that also lets
    saturated controls move back into their box is tried once (same
    acceptance rule), which lets the iterate leave flat saturated regions.
    """
    pb = instance.problem
    if center is None:
        center = instance.initial_ensemble.mean(axis=0)
    norm = _Normaliser(rule, np.asarray(center, dtype=float), pb.state_scale)
    bound = settings.coef_bound

    def search(z, J, g, step):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= settings.grad_tol:
            return None
        while step >= settings.min_step:
            z_new = np.clip(z - (step / gnorm) * g, -bound, bound)
            try:
                J_new, gk, gK, _ = objective_and_gradient(instance, norm.to_rule(z_new))
            except DivergenceError:
                step *= settings.decay
                continue
            if J_new <= J:
                return z_new, J_new, norm.grad(gk, gK), step
            step *= settings.decay
        return None

    z = np.clip(norm.from_rule(rule), -bound, bound)
    J, gk, gK, _ = objective_and_gradient(instance, norm.to_rule(z))
    g = norm.grad(gk, gK)
    trace = [J]
    step = settings.learning_rate
    status = "max_iter"
    it = 0
    flat = 0
    for it in range(1, settings.max_iter + 1):
        found = search(z, J, g, step)
        if found is None:
            _, pk, pK, _ = objective_and_gradient(instance, norm.to_rule(z),
                                                  through_saturated=True)
            found = search(z, J, norm.grad(pk, pK), settings.learning_rate)
        if found is None:
            status = ("stationary" if np.linalg.norm(g) <= settings.grad_tol
                      else "step_underflow")
            break
        z_new, J_new, g, step = found
        moved = float(np.max(np.abs(z_new - z)))
        flat = flat + 1 if J - J_new <= 1e-12 * max(abs(J), 1.0) else 0
        z, J = z_new, J_new
        trace.append(J)
        step *= settings.growth
        if moved == 0.0 or flat >= settings.stall_iters:
            status = "stalled"
            break
    return OptimizeResult(norm.to_rule(z), J, trace, it, status)


def state_stats(states: np.ndarray, period: int, start: int = 0) -> EnsembleStats:
    """Per-phase moments of states ``(M, L, nx)`` pooled over paths and cycles."""
    M, L, nx = states.shape
    phases = (start + np.arange(L)) % period
    mean = np.zeros((period, nx))
    cov = np.zeros((period, nx, nx))
    counts = np.zeros(period, dtype=int)
    for tau in range(period):
        x = states[:, phases == tau].reshape(-1, nx)
        counts[tau] = x.shape[0]
        if x.shape[0]:
            mean[tau] = x.mean(axis=0)
            xc = x - mean[tau]
            cov[tau] = xc.T @ xc / x.shape[0]
    return EnsembleStats(mean, cov, int(counts.sum()), counts)


def violation_rates(problem: GenericProblem, states: np.ndarray) -> list[float]:
    """Empirical joint violation frequency of the constraint at each step ``1..H``."""
    c = problem.constraint
    if c is None:
        return [0.0] * (states.shape[1] - 1)
    return [violation_rate(states[:, k] @ c.C.T, c.lower, c.upper)
            for k in range(1, states.shape[1])]


@dataclass
class Solution:
    """Optimised rule plus the ensembles and diagnostics that certify it.

    ``instance`` holds the scenarios and initial ensemble of the final round
    (``None`` for a solution read back from disk); when present,
    ``objective`` equals ``saa_objective(instance, rule)``.
    """

    rule: DecisionRule
    problem: GenericProblem
    objective: float
    breakdown: Breakdown
    initial_ensemble: np.ndarray
    terminal_ensemble: np.ndarray
    stats: EnsembleStats
    diagnostics: dict = field(default_factory=dict)
    instance: SaaInstance | None = None

    @property
    def converged(self) -> bool:
        return bool(self.diagnostics.get("converged", False))


def _default_basis(problem: GenericProblem) -> PeriodicBasis:
    return build_basis(problem.calendar, [min(1, p // 2) for p in problem.calendar.periods])


def solve_offline(
    problem: GenericProblem,
    settings: SolverSettings,
    basis: PeriodicBasis | None = None,
    *,
    scenarios: list[NoisePath] | None = None,
    initial_state: np.ndarray | None = None,
    initial_rule: DecisionRule | None = None,
) -> Solution:
    """Optimise a periodic decision rule over one master cycle.

    Round 0 starts every scenario at ``initial_state`` (default: the problem
    anchor).  Noise-echo state components are always taken from each
    scenario's history (:func:`align_initial_states`).  Each round runs :func:`optimize_rule`, then restarts from the
    terminal ensemble, driving the initial and terminal laws to a common fixed
    point.  Stops once the wrap-around gap is below ``wrap_tol`` and the
    objective changed by less than ``rel_tol`` (relative) between rounds.

    With ``wrap_weight = 0`` and ``picard_rounds = 1`` this is the plain
    finite-horizon problem from the anchor.
    """
    T = problem.period
    basis = _default_basis(problem) if basis is None else basis
    if basis.calendar.master_period != T:
        raise ValueError("basis and problem use different master periods")
    if scenarios is None:
        scenarios = simulate_ensemble(problem.noise, settings.scenarios, T,
                                      settings.burn_in_cycles, settings.seed)
    M = len(scenarios)
    x_anchor = problem.initial_state if initial_state is None else np.asarray(initial_state, float)
    X0 = np.repeat(np.atleast_2d(x_anchor), M, axis=0) if np.ndim(x_anchor) == 1 else x_anchor
    X0 = align_initial_states(problem, X0, scenarios)
    rule = initial_rule or DecisionRule.zeros(basis, problem.state_dim, problem.control_dim,
                                              problem.control_lower, problem.control_upper)
    alpha = problem.constraint.alpha if problem.constraint is not None else 0.0
    level = 1.0 - alpha * settings.chance_margin
    center = problem.initial_state

    traces: list[list[float]] = []
    round_objectives: list[float] = []
    gaps: list[float] = []
    iterations = 0
    converged = False
    status = "max_rounds"
    inst = None
    for r in range(settings.picard_rounds):
        inst = SaaInstance(problem, scenarios, X0, start=0,
                           chance_weight=settings.chance_weight, chance_level=level,
                           terminal="wrap", terminal_weight=settings.wrap_weight)
        res = optimize_rule(inst, rule, settings, center=center)
        rule = res.rule
        traces.append(res.trace)
        iterations += res.iterations
        bd = objective_breakdown(inst, rule)
        round_objectives.append(bd.objective)
        gaps.append(bd.gap)
        log.info("round %d: objective %.6g gap %.3g (%s, %d it)", r, bd.objective, bd.gap,
                 res.status, res.iterations)
        if r > 0:
            prev = round_objectives[-2]
            rel = abs(bd.objective - prev) / max(abs(prev), 1e-12)
            if bd.gap < settings.wrap_tol and rel < settings.rel_tol:
                converged = True
                status = "converged"
                break
        if r == settings.picard_rounds - 1:
            break
        X0 = align_initial_states(problem, rollout(inst, rule).states[:, -1], scenarios)

    assert inst is not None
    if settings.picard_rounds == 1:
        # single pass: nothing to iterate, report the within-round result
        converged = gaps[-1] < settings.wrap_tol or settings.wrap_weight == 0
        status = "single_round"
    traj: Trajectories = rollout(inst, rule)
    bd = objective_breakdown(inst, rule, traj)
    diagnostics = {
        "converged": converged,
        "status": status,
        "rounds": len(round_objectives),
        "iterations": iterations,
        "objective_trace": [float(v) for tr in traces for v in tr],
        "round_traces": traces,
        "round_objectives": round_objectives,
        "round_gaps": gaps,
        "wrap_gap": bd.gap,
        "violation_rate": violation_rates(problem, traj.states),
        "chance_level": level,
    }
    diagnostics.update(problem.stage_loss.diagnostics(inst.noise))
    return Solution(
        rule=rule,
        problem=problem,
        instance=inst,
        objective=bd.objective,
        breakdown=bd,
        initial_ensemble=inst.initial_ensemble,
        terminal_ensemble=traj.states[:, -1].copy(),
        stats=state_stats(traj.states[:, :T], T),
        diagnostics=diagnostics,
    )


def wrap_moments(solution: Solution) -> tuple[np.ndarray, np.ndarray]:
    return scaled_moments(solution.terminal_ensemble, solution.problem.state_scale)
