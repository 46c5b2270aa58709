from __future__ import annotations

from dataclasses import asdict, dataclass, fields


class SolverError(RuntimeError):
    """Base class for solver failures."""


class DivergenceError(SolverError):
    """A rollout produced non-finite states or the objective became non-finite."""


@dataclass(frozen=True)
class SolverSettings:
    """Knobs for the first-order SAA solver.

    Step sizes are distances in normalised coefficient space: controls in
    units of their box width, states in units of ``problem.state_scale``.  ``chance_margin``
    scales the violation level used while training (1.0 = as specified).
    A round stops early once ``stall_iters`` consecutive iterations improved
    the objective by less than ``1e-12`` relative.
    """

    scenarios: int = 200
    burn_in_cycles: int = 3
    learning_rate: float = 0.1
    decay: float = 0.5
    growth: float = 1.5
    max_iter: int = 300
    chance_weight: float = 100.0
    wrap_weight: float = 100.0
    picard_rounds: int = 10
    rel_tol: float = 1e-4
    wrap_tol: float = 1e-3
    grad_tol: float = 1e-10
    min_step: float = 1e-12
    stall_iters: int = 50
    coef_bound: float = 1e6
    chance_margin: float = 1.0
    terminal_weight: float = 100.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("scenarios", "max_iter", "picard_rounds", "stall_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("learning_rate", "rel_tol", "wrap_tol", "grad_tol", "min_step",
                     "coef_bound"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("chance_weight", "wrap_weight", "terminal_weight", "burn_in_cycles"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0 < self.decay < 1:
            raise ValueError("decay must lie in (0, 1)")
        if self.growth < 1:
            raise ValueError("growth must be >= 1")
        if not 0 < self.chance_margin <= 1:
            raise ValueError("chance_margin must lie in (0, 1]")

    def replace(self, **changes) -> "SolverSettings":
        data = asdict(self)
        data.update(changes)
        return SolverSettings(**data)

    @classmethod
    def from_section(cls, section, seed: int) -> "SolverSettings":
        names = {f.name for f in fields(cls)}
        data = {k: v for k, v in section.model_dump().items() if k in names}
        return cls(seed=seed, **data)
