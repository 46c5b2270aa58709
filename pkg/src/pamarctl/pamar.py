"""Multi-seasonal periodic ARMA (PAR / PAMAR) processes.

A process ``Y`` of dimension ``d`` evolves as::

    Y_t = mu[s(t)] + sum_{i=1..p} phi[i, s(t)] Y_{t-i} + sum_{i=0..q} theta[i, s(t)] eps_{t-i}

with Gaussian innovations ``eps_t ~ N(eta_bar[t mod T], diag(sigma^2))``.

Seasonal parameters are keyed on the full season tuple ``s(t)``.  Because the
last entry of the tuple is ``t mod T`` (``T`` the master period), the tuple and
the phase carry the same information, so everything is stored per phase
``0..T-1`` and season tuples are a derived view.

Histories are always chronological: row ``-1`` is the most recent value.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

__all__ = [
    "SeasonCalendar",
    "PamarModel",
    "History",
    "NoisePath",
    "EnsembleStats",
    "DivergenceWarning",
    "season_index",
    "simulate_path",
    "simulate_ensemble",
    "replay",
    "forecast",
    "periodic_mean",
    "stationary_history",
    "periodic_moments",
    "variance_growth",
    "ensemble_values",
    "write_ensemble_csv",
]


class DivergenceWarning(RuntimeWarning):
    """Per-phase variance of a simulated ensemble grew beyond the threshold."""


@dataclass(frozen=True)
class SeasonCalendar:
    """Nested periods ``T_1 < T_2 < ... < T_S``, each dividing ``T = T_S``."""

    periods: tuple[int, ...]

    def __post_init__(self) -> None:
        periods = tuple(int(p) for p in self.periods)
        object.__setattr__(self, "periods", periods)
        if not periods:
            raise ValueError("calendar needs at least one period")
        if any(p < 1 for p in periods):
            raise ValueError(f"periods must be positive, got {periods}")
        if any(a >= b for a, b in zip(periods, periods[1:])):
            raise ValueError(f"periods must be strictly increasing, got {periods}")
        master = periods[-1]
        bad = [p for p in periods if master % p]
        if bad:
            raise ValueError(
                f"periods {bad} do not divide the master period {master} "
                f"(calendar {periods})"
            )

    @property
    def master_period(self) -> int:
        return self.periods[-1]

    def phase(self, t: int) -> int:
        return int(t) % self.master_period

    def season(self, t: int) -> tuple[int, ...]:
        return season_index(t, self)

    def seasons(self) -> list[tuple[int, ...]]:
        """Season tuples for phases ``0..T-1`` in order."""
        return [self.season(t) for t in range(self.master_period)]


def season_index(t: int, cal: SeasonCalendar) -> tuple[int, ...]:
    """Season tuple ``(t mod T_1, ..., t mod T_S)``."""
    if t < 0:
        raise ValueError(f"time must be nonnegative, got {t}")
    return tuple(int(t) % p for p in cal.periods)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _per_phase_vectors(value, T: int, d: int, name: str) -> np.ndarray:
    """Broadcast a scalar, per-phase scalars ``(T,)`` or ``(T, d)`` to ``(T, d)``."""
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        return np.full((T, d), float(a))
    if a.ndim == 1 and a.shape[0] == T and d == 1:
        return a.reshape(T, 1).copy()
    if a.ndim == 1 and a.shape[0] == d:
        return np.tile(a, (T, 1))
    if a.shape == (T, d):
        return a.copy()
    raise ValueError(f"{name}: cannot broadcast shape {a.shape} to (T={T}, d={d})")


def _per_phase_matrices(value, T: int, d: int, name: str) -> np.ndarray:
    """Broadcast to ``(T, d, d)``.

    Accepted: scalar (times identity, all phases), ``(T,)`` per-phase scalars,
    ``(d, d)`` one matrix for all phases, ``(T, d, d)``.
    """
    a = np.asarray(value, dtype=float)
    eye = np.eye(d)
    if a.ndim == 0:
        return np.broadcast_to(float(a) * eye, (T, d, d)).copy()
    if a.ndim == 1 and a.shape[0] == T:
        return a[:, None, None] * eye[None]
    if a.ndim == 2 and a.shape == (d, d):
        return np.broadcast_to(a, (T, d, d)).copy()
    if a.shape == (T, d, d):
        return a.copy()
    raise ValueError(f"{name}: cannot broadcast shape {a.shape} to (T={T}, {d}, {d})")


@dataclass(frozen=True, eq=False)
class PamarModel:
    """Periodic ARMA model stored per phase of the master period.

    Attributes
    ----------
    calendar : SeasonCalendar
    mu : ndarray, shape (T, d)
        Seasonal means.
    phi : ndarray, shape (p, T, d, d)
        ``phi[i-1, tau]`` is the lag-``i`` AR matrix at phase ``tau``.
    theta : ndarray, shape (q + 1, T, d, d)
        ``theta[i, tau]`` is the lag-``i`` MA matrix; ``theta[0]`` weights the
        contemporaneous innovation and defaults to the identity.
    innovation_mean : ndarray, shape (T, d)
        Periodic innovation mean ``eta_bar``.
    innovation_std : ndarray, shape (d,)
        Per-component innovation standard deviation.
    """

    calendar: SeasonCalendar
    mu: np.ndarray
    phi: np.ndarray
    theta: np.ndarray
    innovation_mean: np.ndarray
    innovation_std: np.ndarray

    def __post_init__(self) -> None:
        T = self.calendar.master_period
        mu = np.asarray(self.mu, dtype=float)
        if mu.ndim != 2 or mu.shape[0] != T:
            raise ValueError(f"mu must have shape (T={T}, d), got {mu.shape}")
        d = mu.shape[1]
        phi = np.asarray(self.phi, dtype=float).reshape(-1, T, d, d)
        theta = np.asarray(self.theta, dtype=float)
        if theta.ndim != 4 or theta.shape[1:] != (T, d, d) or theta.shape[0] < 1:
            raise ValueError(f"theta must have shape (q+1, {T}, {d}, {d}), got {theta.shape}")
        eta = np.asarray(self.innovation_mean, dtype=float)
        if eta.shape != (T, d):
            raise ValueError(f"innovation_mean must have shape ({T}, {d}), got {eta.shape}")
        sigma = np.broadcast_to(np.asarray(self.innovation_std, dtype=float), (d,))
        for name, arr in (("mu", mu), ("phi", phi), ("theta", theta),
                          ("innovation_mean", eta), ("innovation_std", sigma)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        if np.any(sigma < 0):
            raise ValueError("innovation_std must be nonnegative")
        object.__setattr__(self, "mu", _readonly(mu))
        object.__setattr__(self, "phi", _readonly(phi))
        object.__setattr__(self, "theta", _readonly(theta))
        object.__setattr__(self, "innovation_mean", _readonly(eta))
        object.__setattr__(self, "innovation_std", _readonly(sigma))

    @classmethod
    def build(
        cls,
        calendar: SeasonCalendar,
        mu,
        phi: Sequence = (),
        theta: Sequence = (),
        *,
        theta0=None,
        innovation_mean=0.0,
        sigma=1.0,
        dim: int | None = None,
    ) -> "PamarModel":
        """Convenience constructor with broadcasting.

        ``phi`` and ``theta`` list the coefficients for lags ``1..p`` and
        ``1..q``; each entry may be a scalar, per-phase scalars, one ``(d, d)``
        matrix or per-phase matrices.
        """
        T = calendar.master_period
        if dim is None:
            m = np.asarray(mu, dtype=float)
            dim = 1 if m.ndim < 2 else m.shape[1]
        mu_a = _per_phase_vectors(mu, T, dim, "mu")
        phi_a = np.stack([_per_phase_matrices(v, T, dim, f"phi[{i + 1}]")
                          for i, v in enumerate(phi)]) if len(phi) else np.zeros((0, T, dim, dim))
        th0 = _per_phase_matrices(1.0 if theta0 is None else theta0, T, dim, "theta[0]")
        theta_a = np.stack([th0] + [_per_phase_matrices(v, T, dim, f"theta[{i + 1}]")
                                    for i, v in enumerate(theta)])
        eta = _per_phase_vectors(innovation_mean, T, dim, "innovation_mean")
        sig = np.broadcast_to(np.asarray(sigma, dtype=float), (dim,)).copy()
        return cls(calendar, mu_a, phi_a, theta_a, eta, sig)

    @classmethod
    def from_season_maps(
        cls,
        calendar: SeasonCalendar,
        mu: Mapping[tuple[int, ...], Sequence[float]],
        phi: Mapping[tuple[int, tuple[int, ...]], np.ndarray],
        theta: Mapping[tuple[int, tuple[int, ...]], np.ndarray],
        innovation_mean: Mapping[int, Sequence[float]],
        sigma,
        p: int,
        q: int,
    ) -> "PamarModel":
        """Build from maps keyed by season tuple (and lag for ``phi``/``theta``).

        Missing ``theta`` entries at lag 0 default to the identity; every other
        map must be total over the calendar's seasons.
        """
        seasons = calendar.seasons()
        T = len(seasons)
        try:
            mu_a = np.array([np.atleast_1d(np.asarray(mu[s], dtype=float)) for s in seasons])
        except KeyError as exc:
            raise ValueError(f"mu is missing season {exc.args[0]}") from None
        d = mu_a.shape[1]

        def mats(table, lag, default=None):
            out = []
            for s in seasons:
                if (lag, s) in table:
                    out.append(np.atleast_2d(np.asarray(table[(lag, s)], dtype=float)))
                elif default is not None:
                    out.append(default)
                else:
                    raise ValueError(f"missing coefficient for lag {lag}, season {s}")
            return np.array(out).reshape(T, d, d)

        phi_a = np.array([mats(phi, i) for i in range(1, p + 1)]).reshape(p, T, d, d)
        theta_a = np.array([mats(theta, 0, np.eye(d))] + [mats(theta, i) for i in range(1, q + 1)])
        try:
            eta = np.array([np.atleast_1d(np.asarray(innovation_mean[t], dtype=float))
                            for t in range(T)]).reshape(T, d)
        except KeyError as exc:
            raise ValueError(f"innovation_mean is missing phase {exc.args[0]}") from None
        return cls(calendar, mu_a, phi_a, theta_a, eta, np.broadcast_to(sigma, (d,)))

    @property
    def period(self) -> int:
        return self.calendar.master_period

    @property
    def dim(self) -> int:
        return self.mu.shape[1]

    @property
    def p(self) -> int:
        return self.phi.shape[0]

    @property
    def q(self) -> int:
        return self.theta.shape[0] - 1

    def mu_at(self, season: tuple[int, ...]) -> np.ndarray:
        return self.mu[season[-1]]

    def zero_history(self) -> "History":
        return History(np.zeros((self.p, self.dim)), np.zeros((self.q, self.dim)))


class History(NamedTuple):
    """Past values ``(p, d)`` and past innovations ``(q, d)``, oldest first."""

    values: np.ndarray
    innovations: np.ndarray


@dataclass(frozen=True, eq=False)
class NoisePath:
    """One realised path together with everything needed to replay it."""

    values: np.ndarray
    innovations: np.ndarray
    history: History
    start: int = 0
    seed: int | None = None
    stream: int | None = None

    def __post_init__(self) -> None:
        if self.values.shape != self.innovations.shape:
            raise ValueError("values and innovations must have the same shape")

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class EnsembleStats:
    """Per-phase pooled mean ``(T, d)`` and covariance ``(T, d, d)``."""

    mean: np.ndarray
    cov: np.ndarray
    sample_count: int
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def _rng(seed: int | None, stream: int | None) -> np.random.Generator:
    if stream is None:
        return np.random.default_rng(np.random.SeedSequence(seed))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(stream),)))


def _draw_innovations(model: PamarModel, rng: np.random.Generator,
                      length: int, start: int) -> np.ndarray:
    """Gaussian innovations for steps ``start..start+length-1``.

    Swap this routine to change the innovation law; everything else only
    sees the drawn array.
    """
    phases = (start + np.arange(length)) % model.period
    z = rng.standard_normal((length, model.dim))
    return model.innovation_mean[phases] + model.innovation_std * z


def _matvec(mat: np.ndarray, x: np.ndarray) -> np.ndarray:
    # Elementwise reduction keeps each row's arithmetic independent of the
    # batch size, so single-path replay matches batched simulation bitwise.
    return (mat[None, :, :] * x[:, None, :]).sum(axis=-1)


def _recurse(model: PamarModel, eps: np.ndarray, y_hist: np.ndarray,
             eps_hist: np.ndarray, start: int) -> np.ndarray:
    """Run the recursion for a batch: eps ``(M, L, d)``, histories ``(M, p|q, d)``."""
    M, L, d = eps.shape
    p, q, T = model.p, model.q, model.period
    y = np.empty((M, p + L, d))
    y[:, :p] = y_hist
    e = np.concatenate([eps_hist, eps], axis=1)
    for t in range(L):
        ph = (start + t) % T
        acc = np.repeat(model.mu[ph][None, :], M, axis=0)
        for i in range(1, p + 1):
            acc = acc + _matvec(model.phi[i - 1, ph], y[:, p + t - i])
        for i in range(q + 1):
            acc = acc + _matvec(model.theta[i, ph], e[:, q + t - i])
        y[:, p + t] = acc
    return y[:, p:]


def _check_history(model: PamarModel, history: History | None) -> History:
    if history is None:
        return model.zero_history()
    values = np.asarray(history.values, dtype=float).reshape(-1, model.dim)
    innov = np.asarray(history.innovations, dtype=float).reshape(-1, model.dim)
    if values.shape[0] != model.p or innov.shape[0] != model.q:
        raise ValueError(
            f"history must hold p={model.p} values and q={model.q} innovations, "
            f"got {values.shape[0]} and {innov.shape[0]}"
        )
    if not (np.all(np.isfinite(values)) and np.all(np.isfinite(innov))):
        raise ValueError("history contains non-finite values")
    return History(values, innov)


def replay(model: PamarModel, innovations: np.ndarray, history: History | None = None,
           start: int = 0) -> np.ndarray:
    """Values produced by feeding ``innovations`` ``(L, d)`` through the recursion."""
    h = _check_history(model, history)
    eps = np.asarray(innovations, dtype=float).reshape(1, -1, model.dim)
    return _recurse(model, eps, h.values[None], h.innovations[None], start)[0]


def simulate_path(
    model: PamarModel,
    length: int,
    initial_history: History | None = None,
    seed: int | None = 0,
    *,
    start: int = 0,
    stream: int | None = None,
) -> NoisePath:
    """Simulate ``length`` steps starting at absolute time ``start``.

    ``initial_history`` defaults to zeros.  ``stream`` selects an independent
    substream of ``seed`` (used by :func:`simulate_ensemble`).
    """
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    h = _check_history(model, initial_history)
    eps = _draw_innovations(model, _rng(seed, stream), length, start)
    values = _recurse(model, eps[None], h.values[None], h.innovations[None], start)[0]
    return NoisePath(values, eps, h, start=start, seed=seed, stream=stream)


def periodic_mean(model: PamarModel, max_cycles: int = 10_000,
                  tol: float = 1e-12) -> np.ndarray | None:
    """Per-phase mean ``(T, d)`` of the periodically stationary process.

    Found by iterating the noise-free recursion (innovations at their mean)
    cycle by cycle; returns ``None`` when it does not settle.
    """
    T = model.period
    h = model.zero_history()
    prev = None
    for _ in range(max_cycles):
        cycle = forecast(model, h, T, start=0)
        if not np.all(np.isfinite(cycle)) or np.max(np.abs(cycle), initial=0.0) > 1e150:
            return None
        if prev is not None and np.max(np.abs(cycle - prev)) <= tol * (1.0 + np.max(np.abs(cycle))):
            return cycle
        prev = cycle
        h = History(_tail(np.concatenate([h.values, cycle]), model.p),
                    _tail(np.concatenate([h.innovations, model.innovation_mean]), model.q))
    return None


def _tail(a: np.ndarray, n: int) -> np.ndarray:
    return a[a.shape[0] - n:] if n else a[:0]


def stationary_history(model: PamarModel) -> History:
    """History at the end of a cycle drawn from the noise-free periodic orbit."""
    T = model.period
    mean = periodic_mean(model)
    if mean is None:
        warnings.warn("no periodic mean orbit; cold-starting from zeros", DivergenceWarning)
        return model.zero_history()
    values = np.array([mean[(-i) % T] for i in range(model.p, 0, -1)]).reshape(model.p, model.dim)
    innov = np.array([model.innovation_mean[(-i) % T]
                      for i in range(model.q, 0, -1)]).reshape(model.q, model.dim)
    return History(values, innov)


def simulate_ensemble(
    model: PamarModel,
    paths: int,
    length: int,
    burn_in_cycles: int = 3,
    seed: int = 0,
    *,
    cold_start: str = "mean",
    divergence_threshold: float = 1e3,
) -> list[NoisePath]:
    """Simulate ``paths`` independent paths of ``length`` steps.

    Path ``m`` draws from substream ``m`` of ``seed``.  Each path first runs
    ``burn_in_cycles`` master cycles from a cold start, which are dropped, so
    retained paths begin at phase 0.  ``cold_start`` is ``"mean"`` (history on
    the noise-free periodic orbit) or ``"zeros"``.

    A :class:`DivergenceWarning` is raised when per-phase variance grows by
    more than ``divergence_threshold`` across the retained cycles.
    """
    if paths < 1:
        raise ValueError(f"need at least one path, got {paths}")
    if burn_in_cycles < 0:
        raise ValueError("burn_in_cycles must be >= 0")
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    if cold_start == "mean":
        h0 = stationary_history(model)
    elif cold_start == "zeros":
        h0 = model.zero_history()
    else:
        raise ValueError(f"unknown cold_start {cold_start!r}")
    burn = burn_in_cycles * model.period
    total = burn + length
    eps = np.stack([_draw_innovations(model, _rng(seed, m), total, 0) for m in range(paths)])
    y_hist = np.repeat(h0.values[None], paths, axis=0)
    e_hist = np.repeat(h0.innovations[None], paths, axis=0)
    y = _recurse(model, eps, y_hist, e_hist, 0)

    out = []
    for m in range(paths):
        hv = _tail(np.concatenate([h0.values, y[m, :burn]]), model.p)
        he = _tail(np.concatenate([h0.innovations, eps[m, :burn]]), model.q)
        out.append(NoisePath(y[m, burn:], eps[m, burn:], History(hv, he),
                             start=0, seed=seed, stream=m))

    growth = variance_growth(out, model.calendar)
    if not np.isfinite(growth) or growth > divergence_threshold:
        warnings.warn(f"ensemble per-phase variance grew by {growth:.3g}", DivergenceWarning)
    return out


def forecast(model: PamarModel, history: History, horizon: int, start: int = 0) -> np.ndarray:
    """Conditional mean of ``Y_start .. Y_{start+horizon-1}`` given ``history``.

    ``history`` may hold more than ``p`` values / ``q`` innovations; only the
    most recent ones are used.  Future innovations are replaced by their
    periodic mean.
    """
    values = np.asarray(history.values, dtype=float).reshape(-1, model.dim)
    innov = np.asarray(history.innovations, dtype=float).reshape(-1, model.dim)
    if values.shape[0] < model.p or innov.shape[0] < model.q:
        raise ValueError(
            f"forecast needs {model.p} past values and {model.q} past innovations, "
            f"got {values.shape[0]} and {innov.shape[0]}"
        )
    if horizon <= 0:
        return np.zeros((0, model.dim))
    phases = (start + np.arange(horizon)) % model.period
    eps = model.innovation_mean[phases]
    h = History(_tail(values, model.p), _tail(innov, model.q))
    return _recurse(model, eps[None], h.values[None], h.innovations[None], start)[0]


def ensemble_values(paths: Sequence[NoisePath]) -> np.ndarray:
    """Stack path values into ``(M, L, d)``; rejects ragged ensembles."""
    lengths = {len(p) for p in paths}
    if len(lengths) != 1:
        raise ValueError(f"ragged ensemble, path lengths {sorted(lengths)}")
    return np.stack([p.values for p in paths])


def periodic_moments(ensemble: Sequence[NoisePath], cal: SeasonCalendar) -> EnsembleStats:
    """Pool samples by phase ``(start + t) mod T`` across paths and cycles."""
    if not ensemble:
        raise ValueError("empty ensemble")
    T = cal.master_period
    lengths = {len(p) for p in ensemble}
    if len(lengths) != 1:
        raise ValueError(f"ragged ensemble, path lengths {sorted(lengths)}")
    L = lengths.pop()
    if L % T:
        raise ValueError(f"path length {L} is not a multiple of the master period {T}")
    d = ensemble[0].values.shape[1]
    buckets: list[list[np.ndarray]] = [[] for _ in range(T)]
    for path in ensemble:
        phases = (path.start + np.arange(L)) % T
        for tau in range(T):
            buckets[tau].append(path.values[phases == tau])
    mean = np.zeros((T, d))
    cov = np.zeros((T, d, d))
    counts = np.zeros(T, dtype=int)
    for tau in range(T):
        x = np.concatenate(buckets[tau])
        counts[tau] = x.shape[0]
        mean[tau] = x.mean(axis=0)
        if x.shape[0] > 1:
            c = np.atleast_2d(np.cov(x, rowvar=False))
            cov[tau] = 0.5 * (c + c.T)
    return EnsembleStats(mean, cov, int(counts.sum()), counts)


def variance_growth(paths: Sequence[NoisePath], cal: SeasonCalendar) -> float:
    """Largest ratio of per-phase variance in the last vs the first retained cycle."""
    T = cal.master_period
    y = ensemble_values(paths)
    cycles = y.shape[1] // T
    if cycles < 2 or y.shape[0] < 2:
        return 1.0 if np.all(np.isfinite(y)) else math.inf
    first = y[:, :T].var(axis=0)
    last = y[:, (cycles - 1) * T:cycles * T].var(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(first > 1e-300, last / np.maximum(first, 1e-300),
                         np.where(last > 1e-300, math.inf, 1.0))
    return float(np.max(ratio)) if np.all(np.isfinite(y)) else math.inf


def write_ensemble_csv(paths: Iterable[NoisePath], fh: IO[str]) -> None:
    """CSV with columns ``path_id, t, component, value`` (``t`` absolute)."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["path_id", "t", "component", "value"])
    for m, path in enumerate(paths):
        for k, row in enumerate(path.values):
            for c, v in enumerate(row):
                w.writerow([m, path.start + k, c, repr(float(v))])
