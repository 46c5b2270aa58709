"""Run configuration schema.

Configs are YAML documents validated into :class:`RunConfig`.  Every section
is strict: unknown keys are rejected and reported with their dotted path.
Numeric arrays are plain nested lists; see ``docs/config.md`` for the
broadcasting rules and every field.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

__all__ = [
    "ConfigError",
    "RunConfig",
    "load_config",
    "dump_config",
    "apply_overrides",
]

Array = Union[float, list]


class ConfigError(ValueError):
    """Parse, schema or consistency error in a run configuration."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _numeric(v: Any) -> Any:
    if v is None:
        return v
    try:
        a = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ValueError("expected a number or a (nested) list of numbers") from None
    if not np.all(np.isfinite(a)):
        raise ValueError("values must be finite")
    return v


class CalendarSection(_Strict):
    periods: list[int] = Field(min_length=1)

    @model_validator(mode="after")
    def _check(self):
        from .pamar import SeasonCalendar

        SeasonCalendar(tuple(self.periods))
        return self


class PamarSection(_Strict):
    dim: int = Field(1, ge=1)
    mu: Array = 0.0
    phi: list[Array] = []
    theta: list[Array] = []
    theta0: Optional[Array] = None
    innovation_mean: Array = 0.0
    sigma: Array = 1.0

    _num = field_validator("mu", "theta0", "innovation_mean", "sigma")(_numeric)

    @field_validator("phi", "theta")
    @classmethod
    def _num_list(cls, v):
        for item in v:
            _numeric(item)
        return v


class BasisSection(_Strict):
    harmonics: list[int]


class RiskSection(_Strict):
    kind: Literal["expectation", "cvar"] = "expectation"
    beta: float = Field(1.0, gt=0.0, le=1.0)


class HydropowerSection(_Strict):
    A: Array = 1.0
    B: Array = -1.0
    inflow: Array = 0.0
    efficiency: list[float] = [1.0]
    control_upper: list[float] = [1.0]
    storage_lower: Array = 0.0
    storage_upper: Array = 1.0
    slope: Array = 0.0
    alpha_c: float = Field(0.05, gt=0.0, lt=0.5)
    risk: RiskSection = RiskSection()
    observe_demand: bool = False
    initial_storage: Optional[Array] = None

    _num = field_validator("A", "B", "inflow", "storage_lower", "storage_upper", "slope",
                           "initial_storage")(_numeric)


class VppSection(_Strict):
    battery_capacity: float = Field(gt=0.0)
    battery_efficiency: float = 1.0
    charge_max: float = Field(ge=0.0)
    discharge_max: float = Field(ge=0.0)
    conventional_min: float = 0.0
    conventional_max: float = Field(ge=0.0)
    conventional_cost: float = 0.0
    renewable_max: float = Field(gt=0.0)
    line_limit: float = Field(gt=0.0)
    load: Array = 0.0
    day_ahead_price: Array = 0.0
    alpha_c: float = Field(0.05, gt=0.0, lt=0.5)
    risk: RiskSection = RiskSection()
    initial_battery: Optional[float] = None

    _num = field_validator("load", "day_ahead_price")(_numeric)


class GenericSection(_Strict):
    A: Array
    B: Array
    F: Array = 0.0
    G: Optional[Array] = None
    Q: Array = 0.0
    q: Array = 0.0
    R: Array = 0.0
    r: Array = 0.0
    noise_x: Optional[Array] = None
    noise_u: Optional[Array] = None
    control_lower: list[float]
    control_upper: list[float]
    h_matrix: Optional[Array] = None
    h_lower: Optional[list[float]] = None
    h_upper: Optional[list[float]] = None
    alpha_c: float = Field(0.05, gt=0.0, lt=0.5)
    risk: RiskSection = RiskSection()
    initial_state: Optional[list[float]] = None
    state_scale: Optional[list[float]] = None

    _num = field_validator("A", "B", "F", "G", "Q", "q", "R", "r", "noise_x", "noise_u",
                           "h_matrix")(_numeric)


class ProblemSection(_Strict):
    kind: Literal["hydropower", "vpp", "generic"]
    hydropower: Optional[HydropowerSection] = None
    vpp: Optional[VppSection] = None
    generic: Optional[GenericSection] = None

    @model_validator(mode="after")
    def _one_section(self):
        present = [k for k in ("hydropower", "vpp", "generic") if getattr(self, k) is not None]
        if present != [self.kind]:
            raise ValueError(
                f"problem.kind is {self.kind!r}; exactly the matching subsection must be "
                f"given, found {present}"
            )
        return self


class SolverSection(_Strict):
    scenarios: int = Field(200, ge=1)
    burn_in_cycles: int = Field(3, ge=0)
    learning_rate: float = Field(0.1, gt=0.0)
    decay: float = Field(0.5, gt=0.0, lt=1.0)
    growth: float = Field(1.5, ge=1.0)
    max_iter: int = Field(300, ge=1)
    chance_weight: float = Field(100.0, ge=0.0)
    wrap_weight: float = Field(100.0, ge=0.0)
    picard_rounds: int = Field(10, ge=1)
    rel_tol: float = Field(1e-4, gt=0.0)
    wrap_tol: float = Field(1e-3, gt=0.0)
    grad_tol: float = Field(1e-10, gt=0.0)
    coef_bound: float = Field(1e6, gt=0.0)
    chance_margin: float = Field(1.0, gt=0.0, le=1.0)
    terminal_weight: float = Field(100.0, ge=0.0)


class TransientSection(_Strict):
    t_bar: int = Field(ge=0)
    t_check: int = Field(ge=1)
    observed_state: list[float]
    observed_values: list[list[float]] = []
    observed_innovations: list[list[float]] = []
    scenarios: int = Field(100, ge=1)

    @model_validator(mode="after")
    def _window(self):
        if self.t_check <= self.t_bar:
            raise ValueError(f"t_check ({self.t_check}) must exceed t_bar ({self.t_bar})")
        return self


class EvaluateSection(_Strict):
    cycles: int = Field(3, ge=1)
    paths: int = Field(200, ge=1)
    seed: Optional[int] = None
    use_transient: bool = False
    transient_horizon: int = Field(2, ge=1)
    transient_scenarios: int = Field(20, ge=1)


class BaselineSection(_Strict):
    branching: int = Field(3, ge=1)
    depth: int = Field(3, ge=1)
    grid_points: int = Field(11, ge=2)


class SimulateSection(_Strict):
    paths: int = Field(100, ge=1)
    cycles: int = Field(1, ge=1)
    burn_in_cycles: int = Field(3, ge=0)


class RunConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2**64)
    output_dir: str = "out"
    calendar: CalendarSection
    pamar: PamarSection
    basis: BasisSection
    problem: ProblemSection
    solver: SolverSection = SolverSection()
    transient: Optional[TransientSection] = None
    evaluate: EvaluateSection = EvaluateSection()
    baseline: BaselineSection = BaselineSection()
    simulate: SimulateSection = SimulateSection()

    @model_validator(mode="after")
    def _cross(self):
        periods = self.calendar.periods
        if len(self.basis.harmonics) != len(periods):
            raise ValueError(
                f"basis.harmonics has {len(self.basis.harmonics)} entries but the calendar "
                f"has {len(periods)} periods {periods}"
            )
        for Ti, Mi in zip(periods, self.basis.harmonics):
            if Mi < 0 or 2 * Mi > Ti:
                raise ValueError(f"basis.harmonics: {Mi} harmonics alias for period {Ti}")
        return self


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def parse_config(data: Any, source: str = "<config>") -> RunConfig:
    """Validate a parsed tree and run the cross-field consistency checks."""
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"{source}: {_format_validation(exc)}") from None
    from .model import build_problem

    try:
        build_problem(cfg)
    except ValueError as exc:
        raise ConfigError(f"{source}: inconsistent problem: {exc}") from None
    return cfg


def load_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    """Read, parse and fully validate a YAML run configuration."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"{path}: parse error at {where}: {exc.problem}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from None
    if overrides:
        data = apply_overrides(data, overrides)
    return parse_config(data, str(path))


def dump_config(cfg: RunConfig) -> str:
    """Serialise to YAML; ``parse_config(yaml.safe_load(dump_config(c))) == c``."""
    return yaml.safe_dump(cfg.model_dump(mode="json", exclude_none=True), sort_keys=True)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as YAML scalars."""
    import copy

    data = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            raise ConfigError(f"override {item!r}: cannot parse value") from None
        node = data
        for p in parts[:-1]:
            if not isinstance(node, dict):
                raise ConfigError(f"override {key}: {p} is not a section")
            node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key}: parent is not a section")
        node[parts[-1]] = value
    return data
