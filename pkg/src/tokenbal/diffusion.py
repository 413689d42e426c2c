"""Diffusion: the continuous process and two discrete protocols.

Every node talks to all neighbours each round. In the continuous process
node ``u`` receives ``(x_v - x_u)/(γΔ)`` over each edge. The vertex-based
protocol sends ``floor(x/(d+1))`` tokens everywhere and scatters the
remainder. The edge-based protocol rounds every edge flow up or down at
random so that it is correct in expectation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import rng as _rng
from .graph import Graph
from .matching_process import LoadState

__all__ = [
    "DiffusionMatrix",
    "EdgeFlowError",
    "UnsupportedGraphError",
    "gamma_preset",
    "diffusion_continuous_round",
    "vertex_based_round",
    "edge_based_round",
    "diffusion_deviation_series",
    "deviation_from_edge_errors",
]


class UnsupportedGraphError(ValueError):
    pass


def gamma_preset(g: Graph, name) -> float:
    """``"2"``/``2`` or ``"auto"`` (γ = 1 + 1/Δ); any other number is passed through."""
    if name == "auto":
        return 1 + 1 / g.max_degree
    return float(name)


@dataclass(frozen=True, eq=False)
class DiffusionMatrix:
    graph: Graph
    gamma: float
    P: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        g = self.graph
        P = np.eye(g.n) - g.laplacian() / (self.gamma * g.max_degree)
        P.setflags(write=False)
        object.__setattr__(self, "P", P)

    @property
    def weight(self) -> float:
        return 1.0 / (self.gamma * self.graph.max_degree)

    def apply(self, x: np.ndarray) -> np.ndarray:
        g = self.graph
        eu, ev = g.edges[:, 0], g.edges[:, 1]
        f = (x[ev] - x[eu]) * self.weight
        return x + np.bincount(eu, f, g.n) - np.bincount(ev, f, g.n)


@dataclass(frozen=True)
class EdgeFlowError:
    """``pair[i]`` is ``e_{u,v}`` for edge ``(u, v) = graph.edges[i]``."""

    pair: np.ndarray
    node: np.ndarray
    flow: np.ndarray
    rounded: np.ndarray


def diffusion_continuous_round(state: LoadState, dm: DiffusionMatrix) -> LoadState:
    return LoadState(dm.apply(state.loads.astype(np.float64)), state.t + 1)


def vertex_based_round(state: LoadState, g: Graph, gen) -> LoadState:
    """Each node keeps one share, sends one share to every neighbour, and
    hands its remainder out one token each to a uniformly random subset of
    itself and its neighbours."""
    if not g.is_regular:
        raise UnsupportedGraphError("vertex-based protocol needs a regular graph")
    x = state.loads
    if (x < 0).any():
        raise ValueError("vertex-based protocol needs non-negative loads")
    d = g.max_degree
    share, left = np.divmod(x, d + 1)
    targets = np.concatenate((np.arange(g.n)[:, None], g.neighbor_table()), axis=1)
    new = share.copy()
    new += np.bincount(targets[:, 1:].ravel(), np.repeat(share, d), g.n).astype(np.int64)
    # a uniform left-subset: slots whose random rank falls below the remainder
    ranks = np.argsort(np.argsort(gen.random((g.n, d + 1)), axis=1), axis=1)
    chosen = ranks < left[:, None]
    new += np.bincount(targets[chosen], minlength=g.n).astype(np.int64)
    return LoadState(new, state.t + 1)


def edge_based_round(disc: LoadState, dm: DiffusionMatrix, gen):
    """Randomised rounding of every edge flow computed from ``disc``.

    Returns the new state and the per-edge errors ``e_{u,v} = rounded - flow``.
    """
    g = dm.graph
    x = disc.loads
    eu, ev = g.edges[:, 0], g.edges[:, 1]
    c = (x[ev] - x[eu]) * dm.weight
    lo = np.floor(c)
    r = (lo + (gen.random(len(c)) < c - lo)).astype(np.int64)
    new = x + np.bincount(eu, r, g.n).astype(np.int64) - np.bincount(ev, r, g.n).astype(np.int64)
    e = r - c
    node = np.bincount(eu, e, g.n) - np.bincount(ev, e, g.n)
    return LoadState(new, disc.t + 1), EdgeFlowError(e, node, c, r)


def diffusion_deviation_series(
    x0,
    dm: DiffusionMatrix,
    variant: str = "edge",
    seed: int = 0,
    t_max: int = 100,
    return_log: bool = False,
):
    """Per-round ``max_w |x_w - xi_w|`` with both processes in lockstep."""
    x = LoadState.discrete(x0)
    xi = LoadState.continuous(x0)
    series = np.zeros(t_max)
    errors = []
    identity_err = 0.0
    for t in range(1, t_max + 1):
        if variant == "edge":
            prev = x.loads
            x, err = edge_based_round(x, dm, _rng.stream(seed, t, "edge_rounding"))
            identity_err = max(identity_err, float(np.abs(x.loads - dm.apply(prev.astype(float)) - err.node).max()))
            if return_log:
                errors.append(err.pair)
        elif variant == "vertex":
            x = vertex_based_round(x, dm.graph, _rng.stream(seed, t, "vertex_leftover"))
        else:
            raise ValueError(f"unknown variant {variant!r}")
        xi = diffusion_continuous_round(xi, dm)
        series[t - 1] = np.abs(x.loads - xi.loads).max()
    if return_log:
        return series, {"x": x.loads, "xi": xi.loads, "errors": errors, "identity_error": identity_err}
    return series


def deviation_from_edge_errors(error_logs: Sequence[Sequence[np.ndarray]], dm: DiffusionMatrix) -> np.ndarray:
    """``sum_s sum_edges e_{u,v}^{(s)} (P^{t-s}[u,:] - P^{t-s}[v,:])`` for each log.

    All logs must cover the same number of rounds ``t``. Powers of P are
    formed explicitly and shared across logs.
    """
    g = dm.graph
    eu, ev = g.edges[:, 0], g.edges[:, 1]
    t = len(error_logs[0])
    acc = np.zeros((len(error_logs), g.n))
    Q = np.eye(g.n)
    for s in range(t, 0, -1):
        D = Q[eu] - Q[ev]
        for k, log in enumerate(error_logs):
            acc[k] += log[s - 1] @ D
        Q = Q @ dm.P
    return acc
