"""Problem definitions: linear dynamics, stage losses, constraints.

Time convention used throughout::

    x_{t+1} = A x_t + B u_t + F[(t+1) mod T] + G w_t
    loss_t  = V(t, x_t, w_t, u_t)

The control ``u_t`` is chosen from ``x_t`` alone; the noise ``w_t`` realised
during step ``t`` enters the stage loss and the next state.  This is the
literal reading of the reservoir balance, where the state at ``t`` consumes the
control from ``t - 1``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

from .pamar import PamarModel, SeasonCalendar, periodic_mean
from .risk import CVaR, Expectation, RiskAggregator

__all__ = [
    "LinearStateModel",
    "DemandModel",
    "LinearConstraint",
    "StageLoss",
    "QuadraticStageLoss",
    "HydroRevenueLoss",
    "VppProfitLoss",
    "GenericProblem",
    "step_dynamics",
    "stage_revenue",
    "total_power",
    "build_hydropower",
    "build_vpp",
    "build_generic",
    "build_problem",
    "vpp_clearing_residuals",
    "noise_echo_components",
]


def _ro(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _matrix(value, rows: int, cols: int, name: str) -> np.ndarray:
    a = np.asarray(value, dtype=float)
    if a.ndim == 0 and rows == cols:
        return float(a) * np.eye(rows)
    if a.ndim == 0 and rows == 1 and cols == 1:
        return a.reshape(1, 1)
    a = np.atleast_2d(a)
    if a.shape != (rows, cols):
        raise ValueError(f"{name} must have shape ({rows}, {cols}), got {a.shape}")
    return a


def _phase_vectors(value, T: int, n: int, name: str) -> np.ndarray:
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        return np.full((T, n), float(a))
    if a.ndim == 1 and a.shape[0] == n:
        return np.tile(a, (T, 1))
    if a.ndim == 1 and a.shape[0] == T and n == 1:
        return a.reshape(T, 1)
    if a.shape == (T, n):
        return a.copy()
    raise ValueError(f"{name}: cannot broadcast shape {a.shape} to ({T}, {n})")


def _vector(value, n: int, name: str) -> np.ndarray:
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        return np.full(n, float(a))
    a = a.ravel()
    if a.shape != (n,):
        raise ValueError(f"{name} must have {n} entries, got {a.shape[0]}")
    return a


@dataclass(frozen=True, eq=False)
class LinearStateModel:
    """``x_t = A x_{t-1} + B u_{t-1} + F[t mod T] + G w_{t-1}``."""

    A: np.ndarray
    B: np.ndarray
    F: np.ndarray  # (T, nx)
    G: np.ndarray  # (nx, nw)

    def __post_init__(self) -> None:
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        nx = A.shape[0]
        if A.shape != (nx, nx):
            raise ValueError(f"A must be square, got {A.shape}")
        B = np.asarray(self.B, dtype=float).reshape(nx, -1)
        F = np.asarray(self.F, dtype=float)
        if F.ndim != 2 or F.shape[1] != nx:
            raise ValueError(f"F must have shape (T, {nx}), got {F.shape}")
        G = np.asarray(self.G, dtype=float).reshape(nx, -1)
        for name, a in (("A", A), ("B", B), ("F", F), ("G", G)):
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contains non-finite values")
        for name, a in (("A", A), ("B", B), ("F", F), ("G", G)):
            object.__setattr__(self, name, _ro(a))

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def control_dim(self) -> int:
        return self.B.shape[1]

    @property
    def noise_dim(self) -> int:
        return self.G.shape[1]

    @property
    def period(self) -> int:
        return self.F.shape[0]

    def step_batch(self, t: int, X: np.ndarray, U: np.ndarray, W: np.ndarray | None) -> np.ndarray:
        out = X @ self.A.T + U @ self.B.T + self.F[t % self.period]
        if W is not None and self.noise_dim:
            out = out + W @ self.G.T
        return out


def step_dynamics(m: LinearStateModel, t: int, x_prev, u_prev, w_prev=None) -> np.ndarray:
    """State at time ``t`` from the state, control and noise at ``t - 1``."""
    x = np.asarray(x_prev, dtype=float).ravel()
    u = np.asarray(u_prev, dtype=float).ravel()
    if x.shape != (m.state_dim,) or u.shape != (m.control_dim,):
        raise ValueError(
            f"expected state of size {m.state_dim} and control of size {m.control_dim}, "
            f"got {x.size} and {u.size}"
        )
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise ValueError("state and control must be finite")
    w = None
    if w_prev is not None:
        w = np.asarray(w_prev, dtype=float).reshape(1, -1)
        if not np.all(np.isfinite(w)):
            raise ValueError("noise must be finite")
    return m.step_batch(t, x[None], u[None], w)[0]


@dataclass(frozen=True, eq=False)
class DemandModel:
    """Affine inverse demand ``p(z, t) = c_t - slope[t mod T] * z``.

    The intercept ``c_t`` follows the PAMAR process ``intercept``; slopes are
    deterministic and seasonal.
    """

    intercept: PamarModel
    slope: np.ndarray  # (T,)

    def __post_init__(self) -> None:
        T = self.intercept.period
        d = np.asarray(self.slope, dtype=float)
        d = np.full(T, float(d)) if d.ndim == 0 else d.ravel()
        if d.shape != (T,):
            raise ValueError(f"slope needs one value per phase ({T}), got {d.shape[0]}")
        if np.any(d < 0):
            raise ValueError("demand slopes must be nonnegative")
        object.__setattr__(self, "slope", _ro(d))

    def slope_at(self, t: int) -> float:
        return float(self.slope[int(t) % self.slope.shape[0]])


def stage_revenue(dm: DemandModel, t: int, intercept: float, e_h: float) -> float:
    """Area under the demand curve up to ``e_h``: ``c e - d e^2 / 2``."""
    if e_h < 0:
        raise ValueError(f"delivered energy must be nonnegative, got {e_h}")
    return float(intercept * e_h - 0.5 * dm.slope_at(t) * e_h * e_h)


def total_power(efficiencies, u) -> float:
    """``sum_i a_i u_i``, floored at zero."""
    a = np.asarray(efficiencies, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    if a.shape != u.shape:
        raise ValueError(f"{a.size} efficiencies for {u.size} controls")
    e = float(a @ u)
    if e < 0:
        warnings.warn(f"negative total power {e:.3g} floored at zero", RuntimeWarning)
        return 0.0
    return e


@dataclass(frozen=True, eq=False)
class LinearConstraint:
    """Chance constraint ``P[lower <= C x <= upper] >= 1 - alpha``."""

    C: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    alpha: float

    def __post_init__(self) -> None:
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        lo = np.asarray(self.lower, dtype=float).ravel()
        hi = np.asarray(self.upper, dtype=float).ravel()
        if lo.shape != (C.shape[0],) or hi.shape != (C.shape[0],):
            raise ValueError(
                f"constraint bounds need {C.shape[0]} entries, got {lo.size} and {hi.size}"
            )
        if np.any(lo > hi):
            raise ValueError("constraint lower bound exceeds upper bound")
        if not (0.0 < self.alpha < 0.5):
            raise ValueError(f"violation level alpha must lie in (0, 0.5), got {self.alpha}")
        object.__setattr__(self, "C", _ro(C))
        object.__setattr__(self, "lower", _ro(lo))
        object.__setattr__(self, "upper", _ro(hi))

    def __call__(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.C.T

    def excess(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Worst bound excess per sample, plus the row and sign achieving it."""
        h = X @ self.C.T
        over = h - self.upper
        under = self.lower - h
        worst = np.maximum(over, under)
        j = np.argmax(worst, axis=1)
        rows = np.arange(X.shape[0])
        v = np.maximum(worst[rows, j], 0.0)
        sign = np.where(over[rows, j] >= under[rows, j], 1.0, -1.0)
        return v, j, sign


class StageLoss(Protocol):
    def value(self, t: int, X: np.ndarray, W: np.ndarray, U: np.ndarray) -> np.ndarray: ...

    def grad(self, t: int, X: np.ndarray, W: np.ndarray, U: np.ndarray
             ) -> tuple[np.ndarray, np.ndarray]: ...


class _LossBase:
    scale: float = 1.0

    def __call__(self, t: int, x, w, u) -> float:
        x = np.asarray(x, dtype=float).reshape(1, -1)
        w = np.asarray(w, dtype=float).reshape(1, -1)
        u = np.asarray(u, dtype=float).reshape(1, -1)
        return float(self.value(t, x, w, u)[0])

    def diagnostics(self, W: np.ndarray) -> dict[str, float]:
        return {}


@dataclass(frozen=True, eq=False)
class QuadraticStageLoss(_LossBase):
    """``1/2 x'Qx + q'x + 1/2 u'Ru + r'u + w'Nx x + w'Nu u``, per phase for Q, q, R, r."""

    Q: np.ndarray  # (T, nx, nx)
    q: np.ndarray  # (T, nx)
    R: np.ndarray  # (T, nu, nu)
    r: np.ndarray  # (T, nu)
    noise_x: np.ndarray  # (nw, nx)
    noise_u: np.ndarray  # (nw, nu)
    scale: float = 1.0

    def _p(self, t: int) -> int:
        return int(t) % self.q.shape[0]

    def value(self, t, X, W, U):
        p = self._p(t)
        v = (0.5 * np.einsum("mi,ij,mj->m", X, self.Q[p], X) + X @ self.q[p]
             + 0.5 * np.einsum("mi,ij,mj->m", U, self.R[p], U) + U @ self.r[p]
             + np.einsum("mk,ki,mi->m", W, self.noise_x, X)
             + np.einsum("mk,ki,mi->m", W, self.noise_u, U))
        return self.scale * v

    def grad(self, t, X, W, U):
        p = self._p(t)
        Qs = 0.5 * (self.Q[p] + self.Q[p].T)
        Rs = 0.5 * (self.R[p] + self.R[p].T)
        gx = X @ Qs + self.q[p] + W @ self.noise_x
        gu = U @ Rs + self.r[p] + W @ self.noise_u
        return self.scale * gx, self.scale * gu

    def scaled(self, factor: float) -> "QuadraticStageLoss":
        return QuadraticStageLoss(self.Q, self.q, self.R, self.r, self.noise_x, self.noise_u,
                                  self.scale * factor)


@dataclass(frozen=True, eq=False)
class HydroRevenueLoss(_LossBase):
    """Negative consumer surplus of the delivered hydropower.

    ``w[intercept_index]`` carries the demand intercept ``c_t``.
    """

    demand: DemandModel
    efficiencies: np.ndarray
    intercept_index: int = 0
    scale: float = 1.0

    def value(self, t, X, W, U):
        c = W[:, self.intercept_index]
        e = np.maximum(U @ self.efficiencies, 0.0)
        d = self.demand.slope_at(t)
        return -self.scale * (c * e - 0.5 * d * e * e)

    def grad(self, t, X, W, U):
        c = W[:, self.intercept_index]
        raw = U @ self.efficiencies
        e = np.maximum(raw, 0.0)
        d = self.demand.slope_at(t)
        marginal = np.where(raw > 0, c - d * e, 0.0)
        gu = -self.scale * marginal[:, None] * self.efficiencies[None, :]
        return np.zeros_like(X), gu

    def diagnostics(self, W):
        return {"negative_intercept_fraction": float(np.mean(W[..., self.intercept_index] < 0))}

    def scaled(self, factor: float) -> "HydroRevenueLoss":
        return HydroRevenueLoss(self.demand, self.efficiencies, self.intercept_index,
                                self.scale * factor)


# VPP layout
VPP_STATES = ("battery_energy", "renewable_available", "renewable_delivered",
              "line_flow", "realtime_trade")
VPP_CONTROLS = ("battery_discharge", "battery_charge", "conventional_generation",
                "renewable_curtailment", "day_ahead_trade")
VPP_NOISE = ("renewable", "realtime_price")


@dataclass(frozen=True, eq=False)
class VppProfitLoss(_LossBase):
    """Negative one-step profit of the virtual power plant.

    Profit is ``lambda_DA s_DA + lambda_RT s_RT - cost * g`` with the
    real-time trade ``s_RT`` the balancing residual
    ``g + d_dis - d_ch + (R - curtail) - load - s_DA``.
    """

    load: np.ndarray  # (T,)
    day_ahead_price: np.ndarray  # (T,)
    conventional_cost: float
    scale: float = 1.0

    def realtime_trade(self, t, W, U) -> np.ndarray:
        p = int(t) % self.load.shape[0]
        return U[:, 2] + U[:, 0] - U[:, 1] + (W[:, 0] - U[:, 3]) - self.load[p] - U[:, 4]

    def profit(self, t, W, U) -> np.ndarray:
        p = int(t) % self.load.shape[0]
        s_rt = self.realtime_trade(t, W, U)
        return self.day_ahead_price[p] * U[:, 4] + W[:, 1] * s_rt - self.conventional_cost * U[:, 2]

    def value(self, t, X, W, U):
        return -self.scale * self.profit(t, W, U)

    def grad(self, t, X, W, U):
        p = int(t) % self.load.shape[0]
        lam = W[:, 1]
        gu = np.stack([lam, -lam, lam - self.conventional_cost, -lam,
                       self.day_ahead_price[p] - lam], axis=1)
        return np.zeros_like(X), -self.scale * gu

    def scaled(self, factor: float) -> "VppProfitLoss":
        return VppProfitLoss(self.load, self.day_ahead_price, self.conventional_cost,
                             self.scale * factor)


@dataclass(frozen=True, eq=False)
class GenericProblem:
    """Everything needed to pose and solve the periodic control problem.

    ``state_scale`` sets the units in which wrap-around moment gaps are
    measured and in which the solver normalises feedback gains.
    ``initial_state`` is the anchor for the first Picard round.
    """

    calendar: SeasonCalendar
    noise: PamarModel
    dynamics: LinearStateModel
    stage_loss: Any
    risk: RiskAggregator
    control_lower: np.ndarray
    control_upper: np.ndarray
    initial_state: np.ndarray
    state_scale: np.ndarray
    constraint: LinearConstraint | None = None
    kind: str = "generic"
    info: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        nx, nu = self.dynamics.state_dim, self.dynamics.control_dim
        if self.dynamics.period != self.calendar.master_period:
            raise ValueError(
                f"dynamics are tabulated over {self.dynamics.period} phases, "
                f"calendar master period is {self.calendar.master_period}"
            )
        if self.noise.calendar.periods != self.calendar.periods:
            raise ValueError("noise model and problem use different calendars")
        if self.dynamics.noise_dim not in (0, self.noise.dim):
            raise ValueError(
                f"G expects {self.dynamics.noise_dim} noise components, the noise model has "
                f"{self.noise.dim}"
            )
        lo = _vector(self.control_lower, nu, "control_lower")
        hi = _vector(self.control_upper, nu, "control_upper")
        if np.any(lo > hi):
            raise ValueError("control lower bound exceeds upper bound")
        x0 = _vector(self.initial_state, nx, "initial_state")
        sc = _vector(self.state_scale, nx, "state_scale")
        if np.any(sc <= 0):
            raise ValueError("state_scale must be positive")
        if self.constraint is not None and self.constraint.C.shape[1] != nx:
            raise ValueError(
                f"constraint acts on {self.constraint.C.shape[1]} states, problem has {nx}"
            )
        object.__setattr__(self, "control_lower", _ro(lo))
        object.__setattr__(self, "control_upper", _ro(hi))
        object.__setattr__(self, "initial_state", _ro(x0))
        object.__setattr__(self, "state_scale", _ro(sc))

    @property
    def state_dim(self) -> int:
        return self.dynamics.state_dim

    @property
    def control_dim(self) -> int:
        return self.dynamics.control_dim

    @property
    def period(self) -> int:
        return self.calendar.master_period

    def with_loss_scale(self, factor: float) -> "GenericProblem":
        """Same problem with every stage loss multiplied by ``factor``."""
        return _replace(self, stage_loss=self.stage_loss.scaled(factor))

    def replace(self, **changes) -> "GenericProblem":
        return _replace(self, **changes)

    @property
    def noise_echo(self) -> list[tuple[int, int]]:
        return noise_echo_components(self.dynamics)


def noise_echo_components(dyn: LinearStateModel) -> list[tuple[int, int]]:
    """State components that just record the previous noise value.

    Returns ``(state_index, noise_index)`` pairs for rows with
    ``x_i(t+1) = w_j(t)``: zero rows of ``A``, ``B`` and ``F`` and a unit row
    of ``G``.  Such components are a function of the noise history, so
    solvers set them from the history rather than carrying them over.
    """
    out = []
    for i in range(dyn.state_dim):
        g = dyn.G[i]
        if (dyn.noise_dim and not np.any(dyn.A[i]) and not np.any(dyn.B[i])
                and not np.any(dyn.F[:, i]) and np.count_nonzero(g) == 1):
            j = int(np.flatnonzero(g)[0])
            if g[j] == 1.0:
                out.append((i, j))
    return out


def _replace(problem: GenericProblem, **changes) -> GenericProblem:
    from dataclasses import replace

    return replace(problem, **changes)


def _risk(section) -> RiskAggregator:
    return CVaR(section.beta) if section.kind == "cvar" else Expectation()


def build_noise(cfg) -> PamarModel:
    cal = SeasonCalendar(tuple(cfg.calendar.periods))
    pm = cfg.pamar
    return PamarModel.build(cal, pm.mu, pm.phi, pm.theta, theta0=pm.theta0,
                            innovation_mean=pm.innovation_mean, sigma=pm.sigma, dim=pm.dim)


def build_hydropower(cfg) -> GenericProblem:
    """Reservoir network selling into a PAMAR-driven affine demand curve.

    The noise model is the demand intercept (dimension 1).  With
    ``observe_demand`` the state is augmented by the last realised intercept so
    the rule can react to it; the chance constraint covers storage only.
    """
    from .config import RunConfig

    if not isinstance(cfg, RunConfig):
        cfg = RunConfig.model_validate(cfg)
    hp = cfg.problem.hydropower
    if hp is None:
        raise ValueError("config has no hydropower section")
    noise = build_noise(cfg)
    if noise.dim != 1:
        raise ValueError(f"hydropower demand intercept must be scalar, pamar.dim is {noise.dim}")
    cal = noise.calendar
    T = cal.master_period
    a = np.asarray(hp.efficiency, dtype=float)
    nu = a.size
    A_r = np.atleast_2d(np.asarray(hp.A, dtype=float))
    nr = A_r.shape[0]
    A_r = _matrix(hp.A, nr, nr, "hydropower.A")
    B_r = _matrix(hp.B, nr, nu, "hydropower.B") if np.ndim(hp.B) else float(hp.B) * np.ones((nr, nu))
    F_r = _phase_vectors(hp.inflow, T, nr, "hydropower.inflow")
    lo_r = _vector(hp.storage_lower, nr, "hydropower.storage_lower")
    hi_r = _vector(hp.storage_upper, nr, "hydropower.storage_upper")
    if np.any(lo_r >= hi_r):
        raise ValueError("storage_lower must be below storage_upper")
    u_hi = _vector(hp.control_upper, nu, "hydropower.control_upper")
    if np.any(a < 0) or np.any(u_hi < 0):
        raise ValueError("efficiencies and control upper bounds must be nonnegative")
    demand = DemandModel(noise, hp.slope)
    x0_r = (0.5 * (lo_r + hi_r) if hp.initial_storage is None
            else _vector(hp.initial_storage, nr, "hydropower.initial_storage"))

    if hp.observe_demand:
        nx = nr + 1
        A = np.zeros((nx, nx))
        A[:nr, :nr] = A_r
        B = np.zeros((nx, nu))
        B[:nr] = B_r
        F = np.zeros((T, nx))
        F[:, :nr] = F_r
        G = np.zeros((nx, 1))
        G[nr, 0] = 1.0
        mean = periodic_mean(noise)
        c_anchor = float(mean[T - 1, 0]) if mean is not None else float(noise.mu[T - 1, 0])
        x0 = np.concatenate([x0_r, [c_anchor]])
        c_scale = max(abs(c_anchor), float(noise.innovation_std[0]), 1.0)
        scale = np.concatenate([hi_r - lo_r, [c_scale]])
        C = np.hstack([np.eye(nr), np.zeros((nr, 1))])
    else:
        A, B, F, G = A_r, B_r, F_r, np.zeros((nr, 0))
        x0, scale, C = x0_r, hi_r - lo_r, np.eye(nr)

    return GenericProblem(
        calendar=cal,
        noise=noise,
        dynamics=LinearStateModel(A, B, F, G),
        stage_loss=HydroRevenueLoss(demand, _ro(a)),
        risk=_risk(hp.risk),
        control_lower=np.zeros(nu),
        control_upper=u_hi,
        initial_state=x0,
        state_scale=scale,
        constraint=LinearConstraint(C, lo_r, hi_r, hp.alpha_c),
        kind="hydropower",
        info={"reservoirs": nr, "turbines": nu, "observe_demand": hp.observe_demand},
    )


def build_vpp(cfg) -> GenericProblem:
    """Virtual power plant with battery, conventional unit, renewable and two markets.

    States: battery energy, renewable available, renewable delivered, line flow
    (net export), real-time trade.  Controls: battery discharge, battery
    charge, conventional generation, renewable curtailment, day-ahead trade.
    Noise (``pamar.dim == 2``): renewable availability, real-time price.

    The real-time trade is the balancing residual, so the power balance holds
    identically.  Charging stores ``efficiency`` per unit drawn.
    """
    from .config import RunConfig

    if not isinstance(cfg, RunConfig):
        cfg = RunConfig.model_validate(cfg)
    vp = cfg.problem.vpp
    if vp is None:
        raise ValueError("config has no vpp section")
    if not (0.0 < vp.battery_efficiency <= 1.0):
        raise ValueError(f"battery efficiency must lie in (0, 1], got {vp.battery_efficiency}")
    if vp.conventional_min > vp.conventional_max:
        raise ValueError("conventional_min exceeds conventional_max")
    noise = build_noise(cfg)
    if noise.dim != 2:
        raise ValueError(f"vpp noise must have 2 components (renewable, price), got {noise.dim}")
    cal = noise.calendar
    T = cal.master_period
    load = _phase_vectors(vp.load, T, 1, "vpp.load")[:, 0]
    lam_da = _phase_vectors(vp.day_ahead_price, T, 1, "vpp.day_ahead_price")[:, 0]
    eta = vp.battery_efficiency

    nx, nu = 5, 5
    A = np.zeros((nx, nx))
    A[0, 0] = 1.0
    B = np.zeros((nx, nu))
    B[0, 0], B[0, 1] = -1.0, eta
    B[2, 3] = -1.0
    B[3, :] = [1.0, -1.0, 1.0, -1.0, 0.0]
    B[4, :] = [1.0, -1.0, 1.0, -1.0, -1.0]
    G = np.zeros((nx, 2))
    G[1, 0] = G[2, 0] = G[3, 0] = G[4, 0] = 1.0
    F = np.zeros((T, nx))
    # state at phase tau records the step taken at phase tau - 1
    prev_load = np.roll(load, 1)
    F[:, 3] = -prev_load
    F[:, 4] = -prev_load

    big = 10.0 * (vp.renewable_max + vp.conventional_max + vp.discharge_max + vp.line_limit
                  + float(np.max(np.abs(load))) + 1.0)
    C = np.zeros((3, nx))
    C[0, 0] = C[1, 2] = C[2, 3] = 1.0
    constraint = LinearConstraint(C, [0.0, 0.0, -vp.line_limit],
                                  [vp.battery_capacity, big, vp.line_limit], vp.alpha_c)
    b0 = 0.5 * vp.battery_capacity if vp.initial_battery is None else vp.initial_battery
    r_mean = float(np.mean(noise.mu[:, 0]))
    x0 = np.array([b0, r_mean, r_mean, 0.0, 0.0])
    scale = np.array([vp.battery_capacity, vp.renewable_max, vp.renewable_max,
                      2 * vp.line_limit, 2 * vp.line_limit])
    return GenericProblem(
        calendar=cal,
        noise=noise,
        dynamics=LinearStateModel(A, B, F, G),
        stage_loss=VppProfitLoss(_ro(load), _ro(lam_da), vp.conventional_cost),
        risk=_risk(vp.risk),
        control_lower=[0.0, 0.0, vp.conventional_min, 0.0, -vp.line_limit],
        control_upper=[vp.discharge_max, vp.charge_max, vp.conventional_max,
                       vp.renewable_max, vp.line_limit],
        initial_state=x0,
        state_scale=scale,
        constraint=constraint,
        kind="vpp",
        info={"states": list(VPP_STATES), "controls": list(VPP_CONTROLS),
              "noise": list(VPP_NOISE)},
    )


def build_generic(cfg) -> GenericProblem:
    """Linear dynamics with a quadratic stage loss, straight from the config."""
    from .config import RunConfig

    if not isinstance(cfg, RunConfig):
        cfg = RunConfig.model_validate(cfg)
    g = cfg.problem.generic
    if g is None:
        raise ValueError("config has no generic section")
    noise = build_noise(cfg)
    cal = noise.calendar
    T = cal.master_period
    A = np.atleast_2d(np.asarray(g.A, dtype=float))
    nx = A.shape[0]
    A = _matrix(g.A, nx, nx, "generic.A")
    nu = len(g.control_lower)
    B = _matrix(g.B, nx, nu, "generic.B")
    F = _phase_vectors(g.F, T, nx, "generic.F")
    nw = noise.dim
    G = np.zeros((nx, 0)) if g.G is None else _matrix(g.G, nx, nw, "generic.G")

    def per_phase_mat(v, n, name):
        a = np.asarray(v, dtype=float)
        if a.ndim == 3:
            if a.shape != (T, n, n):
                raise ValueError(f"{name} must have shape ({T}, {n}, {n})")
            return a
        return np.broadcast_to(_matrix(v, n, n, name), (T, n, n)).copy()

    loss = QuadraticStageLoss(
        per_phase_mat(g.Q, nx, "generic.Q"), _phase_vectors(g.q, T, nx, "generic.q"),
        per_phase_mat(g.R, nu, "generic.R"), _phase_vectors(g.r, T, nu, "generic.r"),
        np.zeros((nw, nx)) if g.noise_x is None else _matrix(g.noise_x, nw, nx, "generic.noise_x"),
        np.zeros((nw, nu)) if g.noise_u is None else _matrix(g.noise_u, nw, nu, "generic.noise_u"),
    )
    constraint = None
    if g.h_lower is not None or g.h_upper is not None:
        if g.h_lower is None or g.h_upper is None:
            raise ValueError("generic.h_lower and generic.h_upper must be given together")
        k = len(g.h_lower)
        C = np.eye(nx) if g.h_matrix is None else _matrix(g.h_matrix, k, nx, "generic.h_matrix")
        constraint = LinearConstraint(C, g.h_lower, g.h_upper, g.alpha_c)
    x0 = np.zeros(nx) if g.initial_state is None else g.initial_state
    scale = np.ones(nx) if g.state_scale is None else g.state_scale
    return GenericProblem(cal, noise, LinearStateModel(A, B, F, G), loss, _risk(g.risk),
                          g.control_lower, g.control_upper, x0, scale, constraint, "generic")


def build_problem(cfg) -> GenericProblem:
    kind = cfg.problem.kind
    builder = {"hydropower": build_hydropower, "vpp": build_vpp, "generic": build_generic}[kind]
    return builder(cfg)


def vpp_clearing_residuals(problem: GenericProblem, X: np.ndarray, U: np.ndarray,
                           W: np.ndarray, start: int = 0) -> np.ndarray:
    """Power-balance residual per path and step.

    ``X`` is ``(M, H+1, nx)``, ``U`` ``(M, H, nu)``, ``W`` ``(M, H, nw)``.  The
    balance is generation + discharge + purchases = load + charge + sales, with
    delivered renewable and the real-time trade read from the recorded state.
    """
    loss: VppProfitLoss = problem.stage_loss
    H = U.shape[1]
    out = np.zeros(U.shape[:2])
    for k in range(H):
        t = start + k
        p = t % problem.period
        u = U[:, k]
        nxt = X[:, k + 1]
        trades = np.stack([u[:, 4], nxt[:, 4]], axis=1)
        sales = np.maximum(trades, 0.0).sum(axis=1)
        purchases = np.maximum(-trades, 0.0).sum(axis=1)
        supply = u[:, 2] + nxt[:, 2] + u[:, 0] + purchases
        demand = loss.load[p] + u[:, 1] + sales
        out[:, k] = supply - demand
    return out
