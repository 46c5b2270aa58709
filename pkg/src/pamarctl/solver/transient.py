"""Real-time transient problem pinned to the offline solution."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..basis import DecisionRule, StepBasis, eval_policy
from ..model import GenericProblem
from ..pamar import History, simulate_path
from .offline import Solution, optimize_rule, violation_rates
from .rollout import Breakdown, SaaInstance, objective_breakdown, rollout
from .settings import SolverSettings

__all__ = ["TransientSolution", "solve_transient", "offline_target"]


@dataclass
class TransientSolution:
    rule: DecisionRule
    first_control: np.ndarray
    instance: SaaInstance
    objective: float
    breakdown: Breakdown
    diagnostics: dict = field(default_factory=dict)


def offline_target(offline: Solution, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Offline state mean and covariance (state units) at the phase of ``t``."""
    T = offline.problem.period
    tau = int(t) % T
    return offline.stats.mean[tau].copy(), offline.stats.cov[tau].copy()


def _warm_start(offline: Solution, basis: StepBasis) -> DecisionRule:
    ks, Ks = [], []
    for j in range(basis.horizon):
        k, K = offline.rule.effective(basis.start + j)
        ks.append(k)
        Ks.append(K)
    r = offline.rule
    return DecisionRule(basis, np.array(ks), np.array(Ks), r.lower, r.upper)


def solve_transient(
    problem: GenericProblem,
    offline: Solution | None,
    t_bar: int,
    observed_state,
    history: History,
    t_check: int,
    settings: SolverSettings,
) -> TransientSolution:
    """Optimise a free per-step affine rule over ``t_bar .. t_check - 1``.

    Scenarios continue the observed noise ``history`` (chronological, at least
    ``p`` values and ``q`` innovations) from time ``t_bar``.  Every scenario
    starts at ``observed_state``; the terminal state law at ``t_check`` is
    pulled towards the offline per-phase moments with weight
    ``settings.terminal_weight``.  Returns the rule and the control to apply
    now, ``u(t_bar, observed_state)``.
    """
    if offline is None:
        raise ValueError("transient solve needs an offline solution")
    T = problem.period
    H = t_check - t_bar
    if t_bar < 0 or H < 1:
        raise ValueError(f"need 0 <= t_bar < t_check, got {t_bar}, {t_check}")
    if H > T:
        raise ValueError(f"transient window {H} exceeds the master period {T}")
    x_hat = np.asarray(observed_state, dtype=float).ravel()
    if x_hat.shape != (problem.state_dim,) or not np.all(np.isfinite(x_hat)):
        raise ValueError("observed state must be a finite vector of the problem's state size")
    noise = problem.noise
    values = np.asarray(history.values, dtype=float).reshape(-1, noise.dim)
    innov = np.asarray(history.innovations, dtype=float).reshape(-1, noise.dim)
    if values.shape[0] < noise.p or innov.shape[0] < noise.q:
        raise ValueError(
            f"noise history too short: need {noise.p} values and {noise.q} innovations"
        )
    h = History(values[values.shape[0] - noise.p:], innov[innov.shape[0] - noise.q:])
    scenarios = [simulate_path(noise, H, h, settings.seed, start=t_bar, stream=m)
                 for m in range(settings.scenarios)]
    X0 = np.repeat(x_hat[None], settings.scenarios, axis=0)
    mean, cov = offline_target(offline, t_check)
    alpha = problem.constraint.alpha if problem.constraint is not None else 0.0
    inst = SaaInstance(problem, scenarios, X0, start=t_bar,
                       chance_weight=settings.chance_weight,
                       chance_level=1.0 - alpha * settings.chance_margin,
                       terminal="target", terminal_weight=settings.terminal_weight,
                       target_mean=mean, target_cov=cov)
    basis = StepBasis(t_bar, H)
    res = optimize_rule(inst, _warm_start(offline, basis), settings, center=x_hat)
    traj = rollout(inst, res.rule)
    bd = objective_breakdown(inst, res.rule, traj)
    return TransientSolution(
        rule=res.rule,
        first_control=eval_policy(res.rule, t_bar, x_hat),
        instance=inst,
        objective=bd.objective,
        breakdown=bd,
        diagnostics={"status": res.status, "iterations": res.iterations,
                     "objective_trace": res.trace,
                     "violation_rate": violation_rates(problem, traj.states),
                     "terminal_gap": bd.gap},
    )
