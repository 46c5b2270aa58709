"""Scenario-tree baseline solved by exhaustive enumeration over a control grid.

Independent of the decision-rule machinery: each tree node picks its own
control from a grid, so non-anticipativity holds by construction and the
policy class is strictly richer than any affine rule (up to grid resolution).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..model import GenericProblem
from ..pamar import History, NoisePath, _recurse, stationary_history
from ..risk import RiskKind, aggregate
from .settings import SolverError

__all__ = ["TreeResult", "TreeTooLarge", "build_tree_noise", "control_grid", "solve_tree_baseline"]


class TreeTooLarge(SolverError):
    """Node or enumeration count exceeds the configured guard."""


@dataclass
class TreeResult:
    objective: float
    first_control: np.ndarray
    leaf_paths: list[NoisePath]
    nodes: int
    evaluations: int


def control_grid(problem: GenericProblem, points: int) -> np.ndarray:
    """Tensor grid of ``points`` values per control coordinate, ``(G, nu)``."""
    lo, hi = problem.control_lower, problem.control_upper
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("tree baseline needs finite control bounds")
    axes = [np.linspace(a, b, points) if b > a else np.array([a]) for a, b in zip(lo, hi)]
    return np.array(list(itertools.product(*axes)), dtype=float)


def build_tree_noise(problem: GenericProblem, branching: int, depth: int, seed: int,
                     history: History | None = None, start: int = 0) -> list[NoisePath]:
    """Leaf paths of a sampled tree, in lexicographic order of branch digits.

    Every node at level ``k`` draws ``branching`` child innovations from the
    innovation law at phase ``start + k``; values follow from the recursion,
    so leaves sharing a prefix share the prefix values exactly.
    """
    noise = problem.noise
    h = stationary_history(noise) if history is None else history
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    T = noise.period
    levels = []
    for k in range(depth):
        ph = (start + k) % T
        z = rng.standard_normal((branching ** (k + 1), noise.dim))
        levels.append(noise.innovation_mean[ph] + noise.innovation_std * z)
    n_leaf = branching ** depth
    leaf = np.arange(n_leaf)
    eps = np.stack([levels[k][leaf // branching ** (depth - k - 1)] for k in range(depth)], axis=1)
    y_hist = np.repeat(np.asarray(h.values, dtype=float).reshape(1, noise.p, noise.dim), n_leaf, 0)
    e_hist = np.repeat(np.asarray(h.innovations, dtype=float).reshape(1, noise.q, noise.dim),
                       n_leaf, 0)
    values = _recurse(noise, eps, y_hist, e_hist, start)
    return [NoisePath(values[m], eps[m], h, start=start, seed=seed, stream=m)
            for m in range(n_leaf)]


def solve_tree_baseline(
    problem: GenericProblem,
    branching: int,
    depth: int,
    grid_points: int = 11,
    seed: int = 0,
    initial_state=None,
    *,
    history: History | None = None,
    start: int = 0,
    max_nodes: int = 1_000_000,
    max_evaluations: int = 20_000_000,
) -> TreeResult:
    """Optimal nested-risk value of the sampled tree over a control grid.

    Stage ``k`` (time ``start + k``) chooses ``u`` at each node from the state
    there; the children of the node carry the noise realised during that
    step.  Values are aggregated child-wise with the problem's risk measure
    (the plain mean for expectation).  Chance constraints and wrap-around
    terms are not part of the tree objective.
    """
    if branching < 1 or depth < 1:
        raise ValueError("branching and depth must be >= 1")
    nodes = sum(branching ** k for k in range(depth + 1))
    if nodes > max_nodes:
        raise TreeTooLarge(f"tree has {nodes} nodes, guard is {max_nodes}")
    grid = control_grid(problem, grid_points)
    G = grid.shape[0]
    evaluations = sum((G * branching) ** (k + 1) for k in range(depth))
    if evaluations > max_evaluations:
        raise TreeTooLarge(
            f"enumeration needs {evaluations} evaluations, guard is {max_evaluations}"
        )
    leaves = build_tree_noise(problem, branching, depth, seed, history, start)
    W_leaf = np.stack([p.values for p in leaves])  # (b^D, D, d)
    x0 = problem.initial_state if initial_state is None else np.asarray(initial_state, float)
    b = branching

    # forward expansion: entry i of level k is a (node, control history) pair
    X = x0.reshape(1, -1)
    node = np.zeros(1, dtype=int)
    losses = []
    for k in range(depth):
        t = start + k
        N = X.shape[0]
        child = (node[:, None] * b + np.arange(b)[None, :])  # (N, b)
        w = W_leaf[child * b ** (depth - k - 1), k]  # (N, b, d)
        Xe = np.broadcast_to(X[:, None, None, :], (N, G, b, X.shape[1])).reshape(-1, X.shape[1])
        Ue = np.broadcast_to(grid[None, :, None, :], (N, G, b, grid.shape[1])).reshape(-1, grid.shape[1])
        We = np.broadcast_to(w[:, None, :, :], (N, G, b, w.shape[2])).reshape(-1, w.shape[2])
        losses.append(problem.stage_loss.value(t, Xe, We, Ue).reshape(N, G, b))
        X = problem.dynamics.step_batch(t + 1, Xe, Ue, We)
        node = np.broadcast_to(child[:, None, :], (N, G, b)).reshape(-1)

    V = np.zeros(X.shape[0])
    first = None
    for k in range(depth - 1, -1, -1):
        N = losses[k].shape[0]
        total = losses[k] + V.reshape(N, G, b)
        if problem.risk.kind is RiskKind.EXPECTATION:
            Q = total.mean(axis=2)
        else:
            Q = np.apply_along_axis(lambda v: aggregate(problem.risk, v), 2, total)
        V = Q.min(axis=1)
        if k == 0:
            first = grid[int(np.argmin(Q[0]))]
    return TreeResult(float(V[0]), first.copy(), leaves, nodes, evaluations)
