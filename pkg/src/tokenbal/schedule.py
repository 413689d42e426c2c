"""Per-round matchings: balancing circuits and the two-stage random generator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import rng as _rng
from .graph import EdgeColoring, Graph, edge_coloring

__all__ = [
    "Matching",
    "MatchingSchedule",
    "IntervalMatrix",
    "ScheduleParams",
    "UnsupportedModeError",
    "circuit",
    "random_matching",
    "interval_matrix",
    "matching_matrix",
    "measure_pmin",
    "matchings_to_jsonl",
    "matchings_from_jsonl",
]


class UnsupportedModeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Matching:
    """Disjoint node pairs, each stored with ``u < v`` and sorted."""

    pairs: tuple
    us: np.ndarray = field(init=False, repr=False)
    vs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pairs = tuple(sorted((min(a, b), max(a, b)) for a, b in self.pairs))
        seen = set()
        for a, b in pairs:
            if a == b or a in seen or b in seen:
                raise ValueError(f"not a matching: {pairs}")
            seen.update((a, b))
        object.__setattr__(self, "pairs", pairs)
        arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        us, vs = arr[:, 0].copy(), arr[:, 1].copy()
        us.setflags(write=False)
        vs.setflags(write=False)
        object.__setattr__(self, "us", us)
        object.__setattr__(self, "vs", vs)

    def __len__(self):
        return len(self.pairs)

    def __eq__(self, other):
        return isinstance(other, Matching) and self.pairs == other.pairs

    def __hash__(self):
        return hash(self.pairs)

    def partner(self, n: int) -> np.ndarray:
        """Array mapping each node to its partner, or to itself if unmatched."""
        p = np.arange(n)
        p[self.us] = self.vs
        p[self.vs] = self.us
        return p

    def valid_for(self, g: Graph) -> bool:
        return all(g.has_edge(a, b) for a, b in self.pairs)


@dataclass
class MatchingSchedule:
    """A reproducible source of matchings bound to a graph.

    ``mode`` is ``"circuit"`` (periodic colour classes) or ``"random"``
    (two-stage generator, each round drawn from its own keyed stream).
    """

    graph: Graph
    mode: str
    coloring: Optional[EdgeColoring] = None
    seed: int = 0
    edge_prob: Optional[float] = None
    t: int = 0

    def __post_init__(self):
        if self.mode == "circuit":
            if self.coloring is None:
                self.coloring = edge_coloring(self.graph)
            self._classes = [Matching(c) for c in self.coloring.colors]
        elif self.mode == "random":
            if self.edge_prob is None:
                self.edge_prob = 1.0 / (2 * self.graph.max_degree)
            eu, ev = self.graph.edges[:, 0], self.graph.edges[:, 1]
            self._eu, self._ev = eu, ev
        else:
            raise UnsupportedModeError(f"unknown schedule mode {self.mode!r}")

    @property
    def d(self) -> int:
        return len(self._classes) if self.mode == "circuit" else 0

    def descriptor(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "edge_prob": self.edge_prob,
            "graph": {"family": self.graph.family, "params": list(self.graph.params), "n": self.graph.n},
        }

    def matching_at(self, t: int) -> Matching:
        """The matching of round ``t`` (1-based), independent of other rounds."""
        if t < 1:
            raise ValueError("rounds are numbered from 1")
        if self.mode == "circuit":
            return self._classes[(t - 1) % len(self._classes)]
        gen = _rng.stream(self.seed, t, "matching")
        picked = gen.random(len(self._eu)) < self.edge_prob
        cnt = np.bincount(self._eu[picked], minlength=self.graph.n) + np.bincount(
            self._ev[picked], minlength=self.graph.n
        )
        keep = picked & (cnt[self._eu] == 1) & (cnt[self._ev] == 1)
        return Matching(tuple(zip(self._eu[keep].tolist(), self._ev[keep].tolist())))

    def next_matching(self) -> Matching:
        self.t += 1
        return self.matching_at(self.t)

    def take(self, rounds: int, start: int = 1) -> list:
        return [self.matching_at(t) for t in range(start, start + rounds)]

    def round_matrix(self) -> np.ndarray:
        if self.mode != "circuit":
            raise UnsupportedModeError("round matrix is defined for circuits only")
        return interval_matrix(self._classes, self.graph.n).matrix


def circuit(g: Graph, coloring: Optional[EdgeColoring] = None) -> MatchingSchedule:
    return MatchingSchedule(g, "circuit", coloring=coloring)


def random_matching(g: Graph, seed: int = 0, edge_prob: Optional[float] = None) -> MatchingSchedule:
    return MatchingSchedule(g, "random", seed=seed, edge_prob=edge_prob)


def matching_matrix(m: Matching, n: int) -> np.ndarray:
    A = np.eye(n)
    A[m.us, m.us] = A[m.vs, m.vs] = 0.5
    A[m.us, m.vs] = A[m.vs, m.us] = 0.5
    return A


@dataclass(frozen=True)
class IntervalMatrix:
    """``M^(t1) M^(t1+1) ... M^(t2)``, multiplied left to right."""

    matrix: np.ndarray
    t1: int
    t2: int


def interval_matrix(matchings: Sequence[Matching], n: int, t1: int = 1) -> IntervalMatrix:
    A = np.eye(n)
    for m in matchings:
        # right-multiplying by a matching matrix averages column pairs
        avg = (A[:, m.us] + A[:, m.vs]) / 2
        A[:, m.us] = avg
        A[:, m.vs] = avg
    return IntervalMatrix(A, t1, t1 + len(matchings) - 1)


@dataclass(frozen=True)
class ScheduleParams:
    p_min: float
    d: int
    frequencies: np.ndarray


def measure_pmin(s: MatchingSchedule, rounds: int, start: int = 1) -> ScheduleParams:
    if s.mode != "random":
        raise UnsupportedModeError("p_min is measured in random mode only")
    g = s.graph
    keys = g.edges[:, 0] * g.n + g.edges[:, 1]
    counts = np.zeros(g.m)
    for t in range(start, start + rounds):
        m = s.matching_at(t)
        counts[np.searchsorted(keys, m.us * g.n + m.vs)] += 1
    freq = counts / rounds
    return ScheduleParams(float(freq.min()), g.max_degree, freq)


def matchings_to_jsonl(matchings: Iterable[Matching], start: int = 1) -> str:
    return "".join(
        json.dumps({"t": t, "pairs": [list(p) for p in m.pairs]}) + "\n"
        for t, m in enumerate(matchings, start)
    )


def matchings_from_jsonl(text: str) -> list:
    out = []
    for line in text.splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append(Matching(tuple(tuple(p) for p in rec["pairs"])))
    return out
