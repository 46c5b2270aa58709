"""Risk aggregation over sampled losses.

Inputs are always *losses* (larger is worse).  To maximise revenue with CVaR
aversion, pass ``loss = -revenue``.

``beta`` is the TAIL FRACTION: CVaR_beta is the average of the worst
``beta``-mass of the loss distribution.  ``beta = 0.05`` means the worst 5%,
not a 5% confidence level.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "RiskKind",
    "RiskAggregator",
    "Expectation",
    "CVaR",
    "aggregate",
    "risk_weights",
    "cvar_variational",
    "empirical_quantile",
    "violation_rate",
]


class RiskKind(str, Enum):
    EXPECTATION = "expectation"
    CVAR = "cvar"


@dataclass(frozen=True)
class RiskAggregator:
    kind: RiskKind = RiskKind.EXPECTATION
    beta: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", RiskKind(self.kind))
        if self.kind is RiskKind.CVAR and not (0.0 < self.beta <= 1.0):
            raise ValueError(f"CVaR tail fraction beta must lie in (0, 1], got {self.beta}")


def Expectation() -> RiskAggregator:
    return RiskAggregator(RiskKind.EXPECTATION, 1.0)


def CVaR(beta: float) -> RiskAggregator:
    return RiskAggregator(RiskKind.CVAR, float(beta))


def _prepare(losses, weights):
    x = np.asarray(losses, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("empty loss sample")
    if not np.all(np.isfinite(x)):
        raise ValueError("losses must be finite")
    if weights is None:
        w = np.full(x.size, 1.0 / x.size)
    else:
        w = np.asarray(weights, dtype=float).ravel()
        if w.shape != x.shape:
            raise ValueError("weights and losses differ in length")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        s = w.sum()
        if not np.isclose(s, 1.0, rtol=0, atol=1e-9):
            raise ValueError(f"weights must sum to 1, got {s}")
    return x, w


def risk_weights(agg: RiskAggregator, losses, weights=None) -> np.ndarray:
    """Weights ``g`` with ``aggregate(agg, losses) == g @ losses``.

    For CVaR these are the tail-indicator weights at the optimal threshold,
    i.e. a subgradient of the aggregate with respect to the losses.
    """
    x, w = _prepare(losses, weights)
    if agg.kind is RiskKind.EXPECTATION or agg.beta >= 1.0:
        return w.copy()
    order = np.argsort(-x, kind="stable")
    ws = w[order]
    before = np.cumsum(ws) - ws
    take = np.clip(agg.beta - before, 0.0, ws)
    g = np.zeros_like(w)
    g[order] = take / agg.beta
    return g


def aggregate(agg: RiskAggregator, losses, weights=None) -> float:
    """Expectation or CVaR of a weighted loss sample.

    CVaR uses the exact variational value
    ``min_eta eta + (1/beta) sum_m w_m max(loss_m - eta, 0)``, obtained by
    filling the worst ``beta`` mass from the top and splitting the boundary
    atom.
    """
    x, w = _prepare(losses, weights)
    if agg.kind is RiskKind.EXPECTATION or agg.beta >= 1.0:
        return float(np.mean(x)) if weights is None else float(np.dot(w, x))
    return float(np.dot(risk_weights(agg, x, w), x))


def cvar_variational(losses, beta: float, eta: float, weights=None) -> float:
    """The CVaR objective ``eta + (1/beta) E[max(loss - eta, 0)]`` at a given ``eta``."""
    x, w = _prepare(losses, weights)
    return float(eta + np.dot(w, np.maximum(x - eta, 0.0)) / beta)


def empirical_quantile(values, level: float) -> float:
    """Lower empirical quantile: smallest ``v`` with ``P(X <= v) >= level``."""
    x = np.sort(np.asarray(values, dtype=float).ravel())
    if x.size == 0:
        raise ValueError("empty sample")
    if not np.all(np.isfinite(x)):
        raise ValueError("values must be finite")
    if not (0.0 <= level <= 1.0):
        raise ValueError(f"level must lie in [0, 1], got {level}")
    # guard against level * n landing just above an integer by round-off
    k = int(np.ceil(level * x.size - 1e-12)) - 1
    return float(x[min(max(k, 0), x.size - 1)])


def violation_rate(h_values, lower, upper) -> float:
    """Fraction of samples with any component outside ``[lower, upper]``."""
    h = np.asarray(h_values, dtype=float)
    if h.ndim == 1:
        h = h[:, None]
    lo = np.asarray(lower, dtype=float).ravel()
    hi = np.asarray(upper, dtype=float).ravel()
    if lo.shape[0] != h.shape[1] or hi.shape[0] != h.shape[1]:
        raise ValueError(
            f"bounds have {lo.shape[0]}/{hi.shape[0]} components, samples have {h.shape[1]}"
        )
    if h.shape[0] == 0:
        raise ValueError("empty sample")
    bad = np.any((h < lo) | (h > hi), axis=1)
    return float(bad.mean())
