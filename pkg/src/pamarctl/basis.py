"""Periodic time bases and affine decision rules built on them.

Component ``i`` of a :class:`PeriodicBasis` holds cosine/sine atoms with
fundamental period ``T_i``; a harmonic that is already representable with a
shorter period belongs to that shorter period instead, so the frequency sets
are disjoint.  The constant atom belongs to the last (longest) component.

Atoms are tabulated on the phases ``0..T-1`` and every phase entry is computed
from ``tau mod T_i``, so ``atom(t) == atom(t + T_i)`` holds bit for bit and a
rule built on the basis is exactly ``T``-periodic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .pamar import SeasonCalendar

__all__ = [
    "Atom",
    "PeriodicBasis",
    "StepBasis",
    "DecisionRule",
    "Decomposition",
    "build_basis",
    "eval_policy",
    "decompose_state",
]


class Atom(NamedTuple):
    owner: int  # calendar component index, 0-based
    harmonic: int  # k, 0 for the constant atom
    kind: str  # "const", "cos" or "sin"
    period: int


def _atom_value(atom: Atom, t: int) -> float:
    if atom.kind == "const":
        return 1.0
    angle = 2.0 * np.pi * atom.harmonic * (t % atom.period) / atom.period
    return float(np.cos(angle) if atom.kind == "cos" else np.sin(angle))


@dataclass(frozen=True, eq=False)
class PeriodicBasis:
    calendar: SeasonCalendar
    harmonics: tuple[int, ...]
    atoms: tuple[Atom, ...]
    table: np.ndarray  # (T, n_atoms)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def owners(self) -> np.ndarray:
        return np.array([a.owner for a in self.atoms], dtype=int)

    def values_at(self, t: int) -> np.ndarray:
        return self.table[int(t) % self.calendar.master_period]

    def atom_value(self, m: int, t: int) -> float:
        """Atom ``m`` evaluated directly (not through the phase table)."""
        return _atom_value(self.atoms[m], int(t))

    def frequency_sets(self) -> list[list[int]]:
        """Owned harmonics ``k`` (of period ``T_i``) per component."""
        sets: list[list[int]] = [[] for _ in self.calendar.periods]
        for a in self.atoms:
            if a.kind == "cos":
                sets[a.owner].append(a.harmonic)
        return sets

    def spec(self) -> dict:
        return {"type": "periodic", "periods": list(self.calendar.periods),
                "harmonics": list(self.harmonics)}


@dataclass(frozen=True, eq=False)
class StepBasis:
    """Indicator atoms over a finite window ``start .. start + horizon - 1``.

    Used for transient rules, which are free per step rather than periodic.
    """

    start: int
    horizon: int

    @property
    def n_atoms(self) -> int:
        return self.horizon

    def values_at(self, t: int) -> np.ndarray:
        k = int(t) - self.start
        if not 0 <= k < self.horizon:
            raise ValueError(f"time {t} outside window [{self.start}, {self.start + self.horizon})")
        v = np.zeros(self.horizon)
        v[k] = 1.0
        return v

    def spec(self) -> dict:
        return {"type": "step", "start": self.start, "horizon": self.horizon}


def build_basis(cal: SeasonCalendar, harmonics_per_period: Sequence[int]) -> PeriodicBasis:
    """Fourier atoms ``cos/sin(2 pi k t / T_i)`` for ``k = 1..M_i`` plus a constant.

    ``2 * M_i <= T_i`` is required; at exactly ``2k = T_i`` only the cosine is
    kept because the sine vanishes on the integers.
    """
    M = tuple(int(m) for m in harmonics_per_period)
    if not cal.periods:
        raise ValueError("empty calendar")
    if len(M) != len(cal.periods):
        raise ValueError(f"need one harmonic count per period {cal.periods}, got {M}")
    for Ti, Mi in zip(cal.periods, M):
        if Mi < 0:
            raise ValueError(f"harmonic counts must be >= 0, got {M}")
        if 2 * Mi > Ti:
            raise ValueError(f"aliasing: {Mi} harmonics exceed the Nyquist limit of period {Ti}")

    atoms: list[Atom] = []
    for i, (Ti, Mi) in enumerate(zip(cal.periods, M)):
        for k in range(1, Mi + 1):
            if any((k * Tj) % Ti == 0 for Tj in cal.periods[:i]):
                continue  # representable with a shorter period
            atoms.append(Atom(i, k, "cos", Ti))
            if 2 * k != Ti:
                atoms.append(Atom(i, k, "sin", Ti))
    atoms.append(Atom(len(cal.periods) - 1, 0, "const", cal.master_period))

    T = cal.master_period
    table = np.array([[_atom_value(a, tau) for a in atoms] for tau in range(T)])
    table.setflags(write=False)
    return PeriodicBasis(cal, M, tuple(atoms), table)


@dataclass(frozen=True, eq=False)
class DecisionRule:
    """``u(t, x) = clip(sum_m a_m(t) (k_m + K_m x), lower, upper)``.

    Attributes
    ----------
    basis : PeriodicBasis or StepBasis
    intercepts : ndarray, shape (n_atoms, control_dim)
    gains : ndarray, shape (n_atoms, control_dim, state_dim)
    lower, upper : ndarray, shape (control_dim,)
        The control box.
    """

    basis: PeriodicBasis | StepBasis
    intercepts: np.ndarray
    gains: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        k = np.array(self.intercepts, dtype=float)
        K = np.array(self.gains, dtype=float)
        lo = np.array(self.lower, dtype=float).ravel()
        hi = np.array(self.upper, dtype=float).ravel()
        n = self.basis.n_atoms
        if k.ndim != 2 or k.shape[0] != n:
            raise ValueError(f"intercepts must have shape ({n}, control_dim), got {k.shape}")
        if K.ndim != 3 or K.shape[:2] != k.shape:
            raise ValueError(f"gains must have shape {k.shape + ('state_dim',)}, got {K.shape}")
        if lo.shape != (k.shape[1],) or hi.shape != (k.shape[1],) or np.any(lo > hi):
            raise ValueError("control box must satisfy lower <= upper per component")
        for a in (k, K, lo, hi):
            a.setflags(write=False)
        object.__setattr__(self, "intercepts", k)
        object.__setattr__(self, "gains", K)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def zeros(cls, basis, state_dim: int, control_dim: int, lower, upper) -> "DecisionRule":
        n = basis.n_atoms
        return cls(basis, np.zeros((n, control_dim)), np.zeros((n, control_dim, state_dim)),
                   lower, upper)

    @property
    def state_dim(self) -> int:
        return self.gains.shape[2]

    @property
    def control_dim(self) -> int:
        return self.intercepts.shape[1]

    def with_coefficients(self, intercepts, gains) -> "DecisionRule":
        return DecisionRule(self.basis, intercepts, gains, self.lower, self.upper)

    def effective(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Intercept ``(nu,)`` and gain ``(nu, nx)`` in force at time ``t``."""
        a = self.basis.values_at(t)
        return a @ self.intercepts, np.tensordot(a, self.gains, axes=1)

    def raw(self, t: int, X: np.ndarray) -> np.ndarray:
        """Unclipped controls for a batch of states ``(M, nx)``."""
        k, K = self.effective(t)
        return k[None, :] + X @ K.T

    def controls(self, t: int, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Clipped controls and the unclipped values, both ``(M, nu)``."""
        raw = self.raw(t, X)
        return np.clip(raw, self.lower, self.upper), raw

    def flat(self) -> np.ndarray:
        return np.concatenate([self.intercepts.ravel(), self.gains.ravel()])

    def from_flat(self, z: np.ndarray) -> "DecisionRule":
        nk = self.intercepts.size
        return self.with_coefficients(z[:nk].reshape(self.intercepts.shape),
                                      z[nk:].reshape(self.gains.shape))


def eval_policy(rule: DecisionRule, t: int, x) -> np.ndarray:
    """Control at time ``t`` and state ``x``, projected onto the control box."""
    x = np.asarray(x, dtype=float).ravel()
    if x.shape != (rule.state_dim,):
        raise ValueError(f"state has {x.shape[0]} components, rule expects {rule.state_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("state must be finite")
    k, K = rule.effective(t)
    return np.clip(k + K @ x, rule.lower, rule.upper)


class Decomposition(NamedTuple):
    components: np.ndarray  # (S, M, L, nx)
    residual: np.ndarray  # (M, L, nx)
    coefficients: np.ndarray  # (M, n_atoms, nx)


def decompose_state(trajectories, basis: PeriodicBasis, start: int = 0) -> Decomposition:
    """Least-squares split of each path into per-period components.

    ``trajectories`` is ``(M, L, nx)`` (or ``(M, L)`` for scalar states) with
    ``L`` a multiple of the master period.  Component ``i`` is the part of the
    projection carried by atoms owned by period ``T_i``; the residual is what
    the basis cannot represent.
    """
    X = np.asarray(trajectories, dtype=float)
    if X.ndim == 2:
        X = X[..., None]
    if X.ndim != 3:
        raise ValueError(f"expected (paths, time, state) array, got shape {X.shape}")
    T = basis.calendar.master_period
    L = X.shape[1]
    if L % T:
        raise ValueError(f"trajectory length {L} is not a multiple of the master period {T}")
    Phi = basis.table[(start + np.arange(L)) % T]
    rank = np.linalg.matrix_rank(Phi)
    assert rank == basis.n_atoms, f"atom matrix is rank deficient ({rank} < {basis.n_atoms})"
    coef = np.einsum("al,mlx->max", np.linalg.pinv(Phi), X)
    owners = basis.owners
    S = len(basis.calendar.periods)
    comps = np.stack([np.einsum("la,max->mlx", Phi[:, owners == i], coef[:, owners == i])
                      for i in range(S)])
    return Decomposition(comps, X - comps.sum(axis=0), coef)
