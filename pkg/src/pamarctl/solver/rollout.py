"""Sample-average rollouts of a decision rule and the penalised SAA objective.

The objective of a rule on an instance with ``M`` scenarios and ``H`` steps is::

    sum_t R[loss_t]  +  rho_c sum_{t=1..H} Q_t  +  rho_T gap

where ``Q_t`` is the empirical ``(1 - alpha)``-quantile of the worst scaled
bound excess of ``h(x_t)`` and ``gap`` is the squared distance between the
first two moments of the terminal ensemble and either the initial ensemble
(wrap-around) or a fixed target (transient).  Moments are compared in units of
``problem.state_scale`` with population covariances, over every state
component except noise echoes (those are a function of the noise history,
whose law is periodic by construction).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..basis import DecisionRule
from ..model import GenericProblem
from ..pamar import NoisePath, ensemble_values
from ..risk import aggregate, empirical_quantile, risk_weights
from .settings import DivergenceError

__all__ = [
    "SaaInstance",
    "Trajectories",
    "Breakdown",
    "rollout",
    "saa_objective",
    "objective_breakdown",
    "objective_and_gradient",
    "moment_gap",
    "scaled_moments",
    "align_initial_states",
    "gap_components",
]


def align_initial_states(problem: GenericProblem, X0: np.ndarray,
                         scenarios: Sequence[NoisePath]) -> np.ndarray:
    """Copy of ``X0`` whose noise-echo components match each path's history.

    A component that records the previous noise value must agree with the
    noise history the path continues from; see
    :func:`pamarctl.model.noise_echo_components`.  Needs ``p >= 1``, otherwise
    the history holds no values and ``X0`` is returned unchanged.
    """
    X0 = np.array(X0, dtype=float)
    echo = problem.noise_echo
    if not echo or problem.noise.p == 0:
        return X0
    last = np.stack([np.asarray(s.history.values)[-1] for s in scenarios])
    for i, j in echo:
        X0[:, i] = last[:, j]
    return X0


@dataclass(frozen=True, eq=False)
class SaaInstance:
    """Scenarios paired with initial states, plus the penalty configuration.

    ``terminal`` is ``"wrap"`` (match the initial ensemble), ``"target"``
    (match ``target_mean``/``target_cov``, given in state units) or ``"none"``.
    """

    problem: GenericProblem
    scenarios: Sequence[NoisePath]
    initial_ensemble: np.ndarray
    start: int = 0
    chance_weight: float = 0.0
    chance_level: float | None = None
    terminal: str = "wrap"
    terminal_weight: float = 0.0
    target_mean: np.ndarray | None = None
    target_cov: np.ndarray | None = None
    noise: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        W = ensemble_values(self.scenarios)
        X0 = np.atleast_2d(np.asarray(self.initial_ensemble, dtype=float))
        if X0.shape[0] != W.shape[0]:
            raise ValueError(
                f"{W.shape[0]} scenarios but {X0.shape[0]} initial states"
            )
        if X0.shape[1] != self.problem.state_dim:
            raise ValueError("initial states have the wrong dimension")
        if self.terminal not in ("wrap", "target", "none"):
            raise ValueError(f"unknown terminal mode {self.terminal!r}")
        if self.terminal == "target" and (self.target_mean is None or self.target_cov is None):
            raise ValueError("target terminal mode needs target_mean and target_cov")
        X0 = X0.copy()
        X0.setflags(write=False)
        W.setflags(write=False)
        object.__setattr__(self, "initial_ensemble", X0)
        object.__setattr__(self, "noise", W)

    @property
    def paths(self) -> int:
        return self.noise.shape[0]

    @property
    def horizon(self) -> int:
        return self.noise.shape[1]

    @property
    def level(self) -> float:
        """Quantile level used by the chance penalty."""
        if self.chance_level is not None:
            return self.chance_level
        c = self.problem.constraint
        return 1.0 - (c.alpha if c is not None else 0.0)

    def replace(self, **changes) -> "SaaInstance":
        data = {k: getattr(self, k) for k in (
            "problem", "scenarios", "initial_ensemble", "start", "chance_weight",
            "chance_level", "terminal", "terminal_weight", "target_mean", "target_cov")}
        data.update(changes)
        return SaaInstance(**data)


@dataclass(frozen=True, eq=False)
class Trajectories:
    states: np.ndarray  # (M, H+1, nx)
    controls: np.ndarray  # (M, H, nu)
    raw_controls: np.ndarray  # (M, H, nu)
    losses: np.ndarray  # (M, H)
    noise: np.ndarray  # (M, H, nw)
    start: int


@dataclass(frozen=True)
class Breakdown:
    objective: float
    risk: float
    chance: float
    terminal: float
    risk_terms: tuple[float, ...]
    chance_terms: tuple[float, ...]
    gap: float


def rollout(instance: SaaInstance, rule: DecisionRule) -> Trajectories:
    """Simulate every scenario under ``rule`` from its paired initial state."""
    pb = instance.problem
    if rule.state_dim != pb.state_dim or rule.control_dim != pb.control_dim:
        raise ValueError("rule dimensions do not match the problem")
    W = instance.noise
    M, H = W.shape[:2]
    X = np.empty((M, H + 1, pb.state_dim))
    U = np.empty((M, H, pb.control_dim))
    R = np.empty_like(U)
    L = np.empty((M, H))
    X[:, 0] = instance.initial_ensemble
    for k in range(H):
        t = instance.start + k
        U[:, k], R[:, k] = rule.controls(t, X[:, k])
        L[:, k] = pb.stage_loss.value(t, X[:, k], W[:, k], U[:, k])
        X[:, k + 1] = pb.dynamics.step_batch(t + 1, X[:, k], U[:, k], W[:, k])
        if not np.all(np.isfinite(X[:, k + 1])):
            raise DivergenceError(f"non-finite state at step {t + 1}")
    if not np.all(np.isfinite(L)):
        raise DivergenceError("non-finite stage loss")
    return Trajectories(X, U, R, L, W, instance.start)


def scaled_moments(X: np.ndarray, scale: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population covariance of ``X / scale``."""
    Z = X / scale
    m = Z.mean(axis=0)
    Zc = Z - m
    return m, Zc.T @ Zc / Z.shape[0]


def moment_gap(X: np.ndarray, mean: np.ndarray, cov: np.ndarray, scale: np.ndarray) -> float:
    """``|mean(X) - mean|^2 + |cov(X) - cov|_F^2`` with targets already scaled."""
    m, c = scaled_moments(X, scale)
    return float(np.sum((m - mean) ** 2) + np.sum((c - cov) ** 2))


def gap_components(problem: GenericProblem) -> np.ndarray:
    """State indices entering the moment gap: everything but noise echoes."""
    echo = {i for i, _ in problem.noise_echo}
    return np.array([i for i in range(problem.state_dim) if i not in echo], dtype=int)


def _terminal_target(instance: SaaInstance) -> tuple[np.ndarray, np.ndarray, np.ndarray] | None:
    pb = instance.problem
    idx = gap_components(pb)
    scale = pb.state_scale[idx]
    if instance.terminal == "wrap":
        return (idx,) + scaled_moments(instance.initial_ensemble[:, idx], scale)
    if instance.terminal == "target":
        m = np.asarray(instance.target_mean, dtype=float)[idx] / scale
        c = np.asarray(instance.target_cov, dtype=float)[np.ix_(idx, idx)] / np.outer(scale, scale)
        return idx, m, c
    return None


def _chance_scale(problem: GenericProblem) -> np.ndarray:
    c = problem.constraint
    return np.maximum(np.abs(c.C) @ problem.state_scale, 1e-300)


def objective_breakdown(instance: SaaInstance, rule: DecisionRule,
                        traj: Trajectories | None = None) -> Breakdown:
    traj = rollout(instance, rule) if traj is None else traj
    pb = instance.problem
    H = instance.horizon
    risk_terms = tuple(aggregate(pb.risk, traj.losses[:, k]) for k in range(H))
    chance_terms: tuple[float, ...] = ()
    if pb.constraint is not None:
        hs = _chance_scale(pb)
        vals = []
        for k in range(1, H + 1):
            v, j, _ = pb.constraint.excess(traj.states[:, k])
            vals.append(empirical_quantile(v / hs[j], instance.level))
        chance_terms = tuple(vals)
    gap = 0.0
    target = _terminal_target(instance)
    if target is not None:
        idx = target[0]
        gap = moment_gap(traj.states[:, -1, idx], target[1], target[2], pb.state_scale[idx])
    risk = float(sum(risk_terms))
    chance = instance.chance_weight * float(sum(chance_terms))
    terminal = instance.terminal_weight * gap
    return Breakdown(risk + chance + terminal, risk, chance, terminal,
                     risk_terms, chance_terms, gap)


def saa_objective(instance: SaaInstance, rule: DecisionRule) -> float:
    """Penalised sample-average objective of ``rule`` on ``instance``."""
    return objective_breakdown(instance, rule).objective


def _pass_mask(raw, lo, hi, g=None):
    # saturated coordinates pass no gradient; the box boundary counts as inside.
    # With ``g`` given, saturated coordinates whose descent direction points
    # back into the box pass as well.
    inside = (raw >= lo) & (raw <= hi)
    if g is None:
        return inside
    return inside | ((raw < lo) & (g < 0)) | ((raw > hi) & (g > 0))


def objective_and_gradient(instance: SaaInstance, rule: DecisionRule, *,
                           through_saturated: bool = False
                           ) -> tuple[float, np.ndarray, np.ndarray, Trajectories]:
    """Objective and a subgradient with respect to the rule coefficients.

    Returns ``(J, grad_intercepts, grad_gains, trajectories)``.  Saturated
    control coordinates pass no gradient; CVaR uses the
    tail-indicator weights; the quantile penalty differentiates through the
    sample attaining the quantile.  ``through_saturated`` also passes the
    gradient of saturated coordinates whose descent direction re-enters the
    box; that is not a subgradient, only an escape direction.
    """
    pb = instance.problem
    traj = rollout(instance, rule)
    X, U, Raw, W = traj.states, traj.controls, traj.raw_controls, traj.noise
    M, H = W.shape[:2]
    A, B = pb.dynamics.A, pb.dynamics.B
    scale = pb.state_scale
    bd = objective_breakdown(instance, rule, traj)
    if not np.isfinite(bd.objective):
        raise DivergenceError("non-finite objective")

    gk = np.zeros_like(rule.intercepts)
    gK = np.zeros_like(rule.gains)

    lam = np.zeros((M, pb.state_dim))
    target = _terminal_target(instance)
    if target is not None and instance.terminal_weight > 0:
        idx = target[0]
        Z = X[:, -1, idx] / scale[idx]
        m = Z.mean(axis=0)
        Zc = Z - m
        C = Zc.T @ Zc / M
        dZ = 2.0 * (m - target[1])[None, :] / M + 4.0 * Zc @ (C - target[2]) / M
        lam[:, idx] += instance.terminal_weight * dZ / scale[idx]

    chance_grad = _chance_gradients(instance, X) if instance.chance_weight > 0 else None

    for k in range(H - 1, -1, -1):
        t = instance.start + k
        if chance_grad is not None:
            lam = lam + chance_grad[k + 1]
        gU = lam @ B
        gX = lam @ A
        lx, lu = pb.stage_loss.grad(t, X[:, k], W[:, k], U[:, k])
        rw = risk_weights(pb.risk, traj.losses[:, k])
        gU = gU + rw[:, None] * lu
        gX = gX + rw[:, None] * lx
        mask = _pass_mask(Raw[:, k], rule.lower, rule.upper, gU if through_saturated else None)
        gRaw = np.where(mask, gU, 0.0)
        a = rule.basis.values_at(t)
        _, K_eff = rule.effective(t)
        gk += np.outer(a, gRaw.sum(axis=0))
        gK += a[:, None, None] * (gRaw.T @ X[:, k])[None]
        lam = gX + gRaw @ K_eff
    return bd.objective, gk, gK, traj


def _chance_gradients(instance: SaaInstance, X: np.ndarray) -> dict[int, np.ndarray]:
    pb = instance.problem
    c = pb.constraint
    out: dict[int, np.ndarray] = {}
    if c is None:
        return out
    hs = _chance_scale(pb)
    M = X.shape[0]
    level = instance.level
    kq = min(max(int(np.ceil(level * M - 1e-12)) - 1, 0), M - 1)
    for k in range(1, X.shape[1]):
        v, j, sign = c.excess(X[:, k])
        v = v / hs[j]
        order = np.argsort(v, kind="stable")
        m = order[kq]
        g = np.zeros((M, pb.state_dim))
        if v[m] > 0:
            g[m] = instance.chance_weight * sign[m] * c.C[j[m]] / hs[j[m]]
        out[k] = g
    return out
