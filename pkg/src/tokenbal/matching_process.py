"""Continuous and discrete balancing in the matching model.

The discrete protocol lets every matched pair split its combined load as
evenly as possible; when the sum is odd, the orientation ``phi`` decides which
endpoint keeps the extra token. The same rounds can be run in token mode,
where the pooled tokens of a pair are redistributed by a random draw, and a
single node's canonical path can be followed through the rounds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import rng as _rng
from .schedule import Matching, MatchingSchedule

__all__ = [
    "LoadState",
    "OrientationSample",
    "RoundingErrorRecord",
    "TokenState",
    "CanonicalPathTrace",
    "RunTrace",
    "InvariantError",
    "continuous_round",
    "draw_orientation",
    "discrete_round",
    "token_round",
    "canonical_step",
    "normalize",
    "mirror_coupling_run",
    "deviation_series",
    "deviation_from_errors",
    "run_matching",
    "token_walk_batch",
    "canonical_path_batch",
    "discrete_rounds_batch",
]


class InvariantError(AssertionError):
    pass


@dataclass(frozen=True)
class LoadState:
    loads: np.ndarray
    t: int = 0

    @staticmethod
    def discrete(values, t: int = 0) -> "LoadState":
        return LoadState(np.asarray(values, dtype=np.int64).copy(), t)

    @staticmethod
    def continuous(values, t: int = 0) -> "LoadState":
        return LoadState(np.asarray(values, dtype=np.float64).copy(), t)

    @property
    def is_discrete(self) -> bool:
        return np.issubdtype(self.loads.dtype, np.integer)

    @property
    def n(self) -> int:
        return len(self.loads)

    @property
    def total(self):
        return int(self.loads.sum()) if self.is_discrete else float(self.loads.sum())

    @property
    def mean(self) -> float:
        return self.total / self.n


@dataclass(frozen=True)
class OrientationSample:
    """``phi[i]`` is the orientation of pair ``(us[i], vs[i])`` with ``us < vs``."""

    us: np.ndarray
    vs: np.ndarray
    phi: np.ndarray
    strategy: str = "random"

    def of(self, a: int, b: int) -> int:
        """Orientation seen from ``a`` towards ``b``; antisymmetric in its arguments."""
        u, v, sign = (a, b, 1) if a < b else (b, a, -1)
        hit = np.nonzero((self.us == u) & (self.vs == v))[0]
        if not len(hit):
            raise KeyError((a, b))
        return sign * int(self.phi[hit[0]])


@dataclass(frozen=True)
class RoundingErrorRecord:
    """Per-pair errors ``e_{u,v}`` and the per-node aggregate vector."""

    us: np.ndarray
    vs: np.ndarray
    pair: np.ndarray
    node: np.ndarray


def continuous_round(state: LoadState, m: Matching) -> LoadState:
    x = state.loads.astype(np.float64, copy=True)
    avg = (x[m.us] + x[m.vs]) / 2
    x[m.us] = avg
    x[m.vs] = avg
    return LoadState(x, state.t + 1)


def draw_orientation(x: np.ndarray, m: Matching, strategy: str, gen=None) -> np.ndarray:
    """One draw per pair, pairs taken in sorted order."""
    if strategy == "deterministic":
        return np.where(x[m.us] >= x[m.vs], 1, -1).astype(np.int64)
    if strategy != "random":
        raise ValueError(f"unknown orientation strategy {strategy!r}")
    return gen.integers(0, 2, size=len(m)) * 2 - 1


def _split(x: np.ndarray, us, vs, phi):
    s = x[us] + x[vs]
    odd = s % 2
    xu = s // 2 + odd * (phi == 1)
    return xu, s - xu, odd


def discrete_round(
    state: LoadState,
    m: Matching,
    strategy: str = "random",
    gen=None,
    phi: Optional[np.ndarray] = None,
):
    """Returns ``(new_state, orientation, errors)``.

    ``phi`` may be passed explicitly to replay or couple runs.
    """
    x = state.loads
    if phi is None:
        phi = draw_orientation(x, m, strategy, gen)
    phi = np.asarray(phi, dtype=np.int64)
    new = x.copy()
    xu, xv, odd = _split(x, m.us, m.vs, phi)
    new[m.us] = xu
    new[m.vs] = xv
    e_pair = 0.5 * odd * phi
    e_node = np.zeros(len(x))
    e_node[m.us] = e_pair
    e_node[m.vs] = -e_pair
    return (
        LoadState(new, state.t + 1),
        OrientationSample(m.us, m.vs, phi, strategy),
        RoundingErrorRecord(m.us, m.vs, e_pair, e_node),
    )


@dataclass(frozen=True)
class TokenState:
    """``locations[i]`` is the node currently holding token ``i``."""

    locations: np.ndarray

    @staticmethod
    def from_loads(loads) -> "TokenState":
        loads = np.asarray(loads)
        if (loads < 0).any():
            raise InvariantError("token mode needs non-negative loads")
        return TokenState(np.repeat(np.arange(len(loads)), loads).astype(np.int64))

    def loads(self, n: int) -> np.ndarray:
        return np.bincount(self.locations, minlength=n).astype(np.int64)


def token_round(
    state: LoadState,
    tokens: TokenState,
    m: Matching,
    gen=None,
    urn_gen=None,
    phi: Optional[np.ndarray] = None,
    strategy: str = "random",
):
    """Urn formulation of one discrete round.

    Orientations come from ``gen`` exactly as in :func:`discrete_round`, so
    the load vector follows the same path under the same stream. The pooled
    tokens of each pair are shuffled with ``urn_gen`` and the first
    ``ceil``/``floor`` of them go to the smaller endpoint.
    """
    x = state.loads
    n = len(x)
    if not np.array_equal(tokens.loads(n), x):
        raise InvariantError("token locations disagree with the load vector")
    if phi is None:
        phi = draw_orientation(x, m, strategy, gen)
    urn_gen = urn_gen if urn_gen is not None else gen
    xu, xv, _ = _split(x, m.us, m.vs, np.asarray(phi))
    order = np.argsort(tokens.locations, kind="stable")
    starts = np.concatenate(([0], np.cumsum(x)))
    loc = tokens.locations.copy()
    for k, (u, v) in enumerate(zip(m.us.tolist(), m.vs.tolist())):
        pool = np.concatenate((order[starts[u] : starts[u + 1]], order[starts[v] : starts[v + 1]]))
        pool = urn_gen.permutation(pool)
        loc[pool[: xu[k]]] = u
        loc[pool[xu[k] :]] = v
    new = x.copy()
    new[m.us] = xu
    new[m.vs] = xv
    return LoadState(new, state.t + 1), TokenState(loc)


@dataclass(frozen=True)
class CanonicalPathTrace:
    origin: int
    positions: tuple

    @property
    def current(self) -> int:
        return self.positions[-1]


def canonical_step(
    trace: CanonicalPathTrace, state_before: LoadState, m: Matching, orient: OrientationSample
) -> CanonicalPathTrace:
    """Advance the canonical path by one round.

    With ``a`` the current position and ``b`` its partner, the path moves to
    ``b`` exactly when ``x_a >= x_b`` and ``phi_{a,b} = -1``, or when
    ``x_a < x_b`` and ``phi_{a,b} = +1``.
    """
    a = trace.current
    b = int(m.partner(state_before.n)[a])
    if b == a:
        return CanonicalPathTrace(trace.origin, trace.positions + (a,))
    x = state_before.loads
    phi = orient.of(a, b)
    move = (x[a] >= x[b] and phi == -1) or (x[a] < x[b] and phi == 1)
    return CanonicalPathTrace(trace.origin, trace.positions + (b if move else a,))


def normalize(state: LoadState):
    """Shift by ``floor(mean)`` so the mean lies in ``[0, 1)``."""
    offset = state.total // state.n
    return LoadState(state.loads - offset, state.t), int(offset)


def mirror_coupling_run(x0, schedule: MatchingSchedule, seed: int, rounds: int):
    """Run ``x`` and its reflection ``2*floor(mean) - x`` with negated orientations.

    Raises :class:`InvariantError` if the reflection ever fails to hold.
    Returns the two load trajectories as ``(rounds+1, n)`` arrays.
    """
    x = LoadState.discrete(x0)
    c = 2 * (x.total // x.n)
    y = LoadState.discrete(c - x.loads)
    xs, ys = [x.loads], [y.loads]
    for t in range(1, rounds + 1):
        m = schedule.matching_at(t)
        x, o, _ = discrete_round(x, m, "random", _rng.stream(seed, t, "orientation"))
        y, _, _ = discrete_round(y, m, phi=-o.phi)
        if not np.array_equal(y.loads, c - x.loads):
            raise InvariantError(f"mirror identity broken at round {t}")
        xs.append(x.loads)
        ys.append(y.loads)
    return np.array(xs), np.array(ys)


def deviation_from_errors(errors: Sequence[RoundingErrorRecord], matchings: Sequence[Matching], n: int) -> np.ndarray:
    """Evaluate ``sum_s sum_pairs e_{u,v} (B_s[u,w] - B_s[v,w])`` with ``B_s = M^{[s+1,t]}``.

    ``t`` is the number of records supplied. The backward product is grown
    one matching at a time by averaging rows.
    """
    B = np.eye(n)
    acc = np.zeros(n)
    for rec, m in zip(reversed(errors), reversed(matchings)):
        acc += rec.pair @ (B[rec.us] - B[rec.vs])
        avg = (B[m.us] + B[m.vs]) / 2
        B[m.us] = avg
        B[m.vs] = avg
    return acc


def deviation_series(
    x0,
    schedule: MatchingSchedule,
    strategy: str = "random",
    seed: int = 0,
    t_max: int = 100,
    return_log: bool = False,
):
    """Per-round ``max_w |x_w - xi_w|`` for lockstep discrete and continuous runs."""
    x = LoadState.discrete(x0)
    xi = LoadState.continuous(x0)
    series = np.zeros(t_max)
    errors, used = [], []
    for t in range(1, t_max + 1):
        m = schedule.matching_at(t)
        gen = _rng.stream(seed, t, "orientation") if strategy == "random" else None
        x, _, err = discrete_round(x, m, strategy, gen)
        xi = continuous_round(xi, m)
        series[t - 1] = np.abs(x.loads - xi.loads).max()
        if return_log:
            errors.append(err)
            used.append(m)
    if return_log:
        return series, {"x": x.loads, "xi": xi.loads, "errors": errors, "matchings": used}
    return series


# --- full runs -------------------------------------------------------------


@dataclass
class RunTrace:
    seed: int
    descriptor: dict
    records: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    final: Optional[np.ndarray] = None

    def check(self, name: str, ok: bool) -> None:
        passed, total = self.checks.get(name, (0, 0))
        self.checks[name] = (passed + bool(ok), total + 1)

    @property
    def all_checks_pass(self) -> bool:
        return all(p == t for p, t in self.checks.values())

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def _record(t, x, xi, err_l1, full, metrics_fn):
    rec = {
        "t": t,
        "disc": int(x.max() - x.min()),
        "deviation": float(np.abs(x - xi).max()) if xi is not None else None,
        "error_l1": err_l1,
    }
    if full:
        rec["loads"] = x.tolist()
    if metrics_fn is not None:
        rec.update(metrics_fn(x, xi))
    return rec


def run_matching(
    x0,
    schedule: MatchingSchedule,
    seed: int,
    rounds: int,
    strategy: str = "random",
    stride: int = 1,
    tokens: bool = False,
    full_loads: bool = True,
    log_matchings: bool = False,
    metrics_fn=None,
) -> RunTrace:
    """Discrete run with the continuous reference advanced alongside.

    Structural invariants (conservation, extremes, error identity, token
    consistency) are checked each round and tallied in ``trace.checks``.
    """
    x = LoadState.discrete(x0)
    xi = LoadState.continuous(x0)
    tok = TokenState.from_loads(x.loads) if tokens else None
    total = x.total
    trace = RunTrace(seed, {**schedule.descriptor(), "strategy": strategy, "tokens": tokens})
    trace.records.append(_record(0, x.loads, xi.loads, 0.0, full_loads, metrics_fn))
    for t in range(1, rounds + 1):
        m = schedule.matching_at(t)
        gen = _rng.stream(seed, t, "orientation") if strategy == "random" else None
        prev = x.loads
        if tok is not None:
            phi = draw_orientation(prev, m, strategy, gen)
            x_tok, tok = token_round(x, tok, m, urn_gen=_rng.stream(seed, t, "urn"), phi=phi)
            x, orient, err = discrete_round(x, m, phi=phi)
            trace.check("token_consistency", np.array_equal(tok.loads(x.n), x.loads) and np.array_equal(x_tok.loads, x.loads))
        else:
            x, orient, err = discrete_round(x, m, strategy, gen)
        xi = continuous_round(xi, m)
        cur = x.loads
        partner = m.partner(x.n)
        trace.check("conservation", int(cur.sum()) == total)
        trace.check("max_nonincreasing", cur.max() <= prev.max())
        trace.check("min_nondecreasing", cur.min() >= prev.min())
        trace.check("error_identity", np.array_equal(2 * cur - (prev + prev[partner]), (2 * err.node).astype(np.int64)))
        if t % stride == 0 or t == rounds:
            rec = _record(t, cur, xi.loads, float(np.abs(err.pair).sum()), full_loads, metrics_fn)
            if log_matchings:
                rec["pairs"] = [list(p) for p in m.pairs]
                rec["phi"] = orient.phi.tolist()
            trace.records.append(rec)
    trace.final = x.loads
    return trace


# --- batched simulation for statistical checks -----------------------------


def discrete_rounds_batch(X: np.ndarray, matchings: Sequence[Matching], gen, phis=None):
    """Apply the discrete protocol to every row of ``X``; returns loads and orientations per round."""
    X = np.array(X, dtype=np.int64, copy=True)
    out_phi = []
    for k, m in enumerate(matchings):
        if not len(m):
            out_phi.append(np.zeros((len(X), 0), dtype=np.int64))
            continue
        phi = phis[k] if phis is not None else gen.integers(0, 2, size=(len(X), len(m))) * 2 - 1
        xu, xv, _ = _split(X, (slice(None), m.us), (slice(None), m.vs), phi)
        X[:, m.us] = xu
        X[:, m.vs] = xv
        out_phi.append(phi)
    return X, out_phi


def token_walk_batch(x0, matchings: Sequence[Matching], replicas: int, gen) -> np.ndarray:
    """Final token locations for ``replicas`` independent urn runs.

    Tokens are drawn one by one without replacement, which gives each
    endpoint a uniformly random subset of the pool of the right size.
    """
    x0 = np.asarray(x0, dtype=np.int64)
    X = np.repeat(x0[None, :], replicas, axis=0)
    loc = np.repeat(np.repeat(np.arange(len(x0)), x0)[None, :], replicas, axis=0)
    for m in matchings:
        if not len(m):
            continue
        phi = gen.integers(0, 2, size=(replicas, len(m))) * 2 - 1
        xu, xv, _ = _split(X, (slice(None), m.us), (slice(None), m.vs), phi)
        for k, (u, v) in enumerate(zip(m.us.tolist(), m.vs.tolist())):
            rem = X[:, u] + X[:, v]
            slots_u = xu[:, k].copy()
            for i in range(loc.shape[1]):
                inpool = (loc[:, i] == u) | (loc[:, i] == v)
                go_u = gen.random(replicas) * np.maximum(rem, 1) < slots_u
                loc[inpool, i] = np.where(go_u[inpool], u, v)
                slots_u -= inpool & go_u
                rem -= inpool
        X[:, m.us] = xu
        X[:, m.vs] = xv
    return loc


def canonical_path_batch(x0, matchings: Sequence[Matching], origin: int, replicas: int, gen) -> np.ndarray:
    """Final canonical-path positions of ``origin`` over independent runs."""
    X = np.repeat(np.asarray(x0, dtype=np.int64)[None, :], replicas, axis=0)
    pos = np.full(replicas, origin)
    rows = np.arange(replicas)
    for m in matchings:
        if not len(m):
            continue
        n = X.shape[1]
        partner = m.partner(n)
        pair_of = np.full(n, -1)
        pair_of[m.us] = np.arange(len(m))
        pair_of[m.vs] = np.arange(len(m))
        phi = gen.integers(0, 2, size=(replicas, len(m))) * 2 - 1
        b = partner[pos]
        matched = b != pos
        k = pair_of[pos]
        sign = np.where(pos < b, 1, -1)
        phi_ab = sign * phi[rows, np.maximum(k, 0)]
        xa, xb = X[rows, pos], X[rows, b]
        move = matched & (((xa >= xb) & (phi_ab == -1)) | ((xa < xb) & (phi_ab == 1)))
        X, _ = discrete_rounds_batch(X, [m], None, phis=[phi])
        pos = np.where(move, b, pos)
    return pos
