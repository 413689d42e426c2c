"""Exact enumeration over all randomness on tiny instances.

Probabilities are :class:`fractions.Fraction` throughout, so equalities and
inequalities between distributions are decided without rounding.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from math import comb
from typing import Iterable, Optional, Sequence

from ._toml import load_toml
from .schedule import Matching

__all__ = [
    "GuardError",
    "OutcomeDistribution",
    "Instance",
    "check_guard",
    "exact_interval_matrix",
    "enumerate_protocol",
    "token_placements",
    "check_negative_correlation",
    "negative_correlation_sweep",
    "check_marginal_law",
    "check_mirror_coupling",
    "load_manifest",
    "run_manifest",
]

MAX_NODES = 5
MAX_ROUNDS = 4
MAX_LOAD = 6
HALF = Fraction(1, 2)


class GuardError(ValueError):
    pass


@dataclass(frozen=True)
class OutcomeDistribution:
    masses: dict

    def total(self) -> Fraction:
        return sum(self.masses.values(), Fraction(0))

    def tv(self, other: "OutcomeDistribution") -> Fraction:
        keys = set(self.masses) | set(other.masses)
        return sum(
            (abs(self.masses.get(k, Fraction(0)) - other.masses.get(k, Fraction(0))) for k in keys),
            Fraction(0),
        ) / 2

    def __getitem__(self, key):
        return self.masses.get(tuple(key), Fraction(0))


def check_guard(x0: Sequence[int], matchings: Sequence[Matching]) -> None:
    if len(x0) > MAX_NODES or len(matchings) > MAX_ROUNDS or sum(x0) > MAX_LOAD or min(x0) < 0:
        raise GuardError(
            f"instance exceeds n<={MAX_NODES}, rounds<={MAX_ROUNDS}, load<={MAX_LOAD} (or has negative loads)"
        )


def exact_interval_matrix(matchings: Sequence[Matching], n: int) -> list:
    A = [[Fraction(int(i == j)) for j in range(n)] for i in range(n)]
    for m in matchings:
        for u, v in m.pairs:
            for row in A:
                row[u] = row[v] = (row[u] + row[v]) / 2
    return A


def _add(dist: dict, key, p: Fraction) -> None:
    dist[key] = dist.get(key, Fraction(0)) + p


def _split_pair(xu: int, xv: int, phi: int):
    s = xu + xv
    a = s // 2 + (s % 2) * (phi == 1)
    return a, s - a


def _rounding_error_dist(x0, matchings) -> dict:
    dist = {tuple(x0): Fraction(1)}
    for m in matchings:
        for u, v in m.pairs:
            nxt = {}
            for x, p in dist.items():
                for phi in (1, -1):
                    a, b = _split_pair(x[u], x[v], phi)
                    y = list(x)
                    y[u], y[v] = a, b
                    _add(nxt, tuple(y), p * HALF)
            dist = nxt
    return dist


def token_placements(x0: Sequence[int], matchings: Sequence[Matching]) -> dict:
    """Exact law of the token placement vector under the urn process.

    Token ``i`` starts at the node given by listing nodes in order, each
    repeated by its load.
    """
    start = tuple(v for v, k in enumerate(x0) for _ in range(k))
    dist = {start: Fraction(1)}
    for m in matchings:
        for u, v in m.pairs:
            nxt = {}
            for loc, p in dist.items():
                pool = [i for i, w in enumerate(loc) if w in (u, v)]
                xu = sum(1 for w in loc if w == u)
                for phi in (1, -1):
                    k, _ = _split_pair(xu, len(pool) - xu, phi)
                    weight = p * HALF / comb(len(pool), k)
                    for chosen in itertools.combinations(pool, k):
                        y = list(loc)
                        for i in pool:
                            y[i] = u if i in chosen else v
                        _add(nxt, tuple(y), weight)
            dist = nxt
    return dist


def _project(placements: dict, n: int) -> dict:
    out = {}
    for loc, p in placements.items():
        x = [0] * n
        for w in loc:
            x[w] += 1
        _add(out, tuple(x), p)
    return out


def enumerate_protocol(x0: Sequence[int], matchings: Sequence[Matching], mode: str) -> OutcomeDistribution:
    """Exact distribution of the final load vector.

    ``mode="rounding_error"`` enumerates orientation bits; ``"token_urn"``
    also enumerates every urn partition with its hypergeometric weight.
    """
    x0 = [int(v) for v in x0]
    check_guard(x0, matchings)
    if mode == "rounding_error":
        return OutcomeDistribution(_rounding_error_dist(x0, matchings))
    if mode == "token_urn":
        return OutcomeDistribution(_project(token_placements(x0, matchings), len(x0)))
    raise ValueError(f"unknown mode {mode!r}")


def _in_mask(loc, D) -> int:
    mask = 0
    for i, w in enumerate(loc):
        if w in D:
            mask |= 1 << i
    return mask


def check_negative_correlation(x0, matchings, B: Iterable[int], D: Iterable[int]):
    """``(joint, product, ok)`` for the event that every token of ``B`` ends in ``D``."""
    x0 = [int(v) for v in x0]
    check_guard(x0, matchings)
    B, D = sorted(set(B)), set(D)
    placements = token_placements(x0, matchings)
    joint = sum((p for loc, p in placements.items() if all(loc[i] in D for i in B)), Fraction(0))
    M = exact_interval_matrix(matchings, len(x0))
    start = [v for v, k in enumerate(x0) for _ in range(k)]
    product = Fraction(1)
    for i in B:
        product *= sum((M[start[i]][v] for v in D), Fraction(0))
    return joint, product, joint <= product


def negative_correlation_sweep(x0, matchings) -> dict:
    """Every token subset against every node set.

    Returns counts of checks, violations of ``joint <= product`` and
    violations of equality for singletons.
    """
    x0 = [int(v) for v in x0]
    check_guard(x0, matchings)
    n, T = len(x0), sum(x0)
    placements = token_placements(x0, matchings)
    M = exact_interval_matrix(matchings, n)
    start = [v for v, k in enumerate(x0) for _ in range(k)]
    checks = bad = bad_single = 0
    for dmask in range(1 << n):
        D = {v for v in range(n) if dmask >> v & 1}
        masses = {}
        for loc, p in placements.items():
            _add(masses, _in_mask(loc, D), p)
        marg = [sum((M[start[i]][v] for v in D), Fraction(0)) for i in range(T)]
        for bmask in range(1 << T):
            joint = sum((p for m, p in masses.items() if m & bmask == bmask), Fraction(0))
            product = Fraction(1)
            for i in range(T):
                if bmask >> i & 1:
                    product *= marg[i]
            checks += 1
            bad += joint > product
            if bin(bmask).count("1") == 1 and joint != product:
                bad_single += 1
    return {"checks": checks, "violations": bad, "singleton_mismatches": bad_single}


def check_marginal_law(x0, matchings, token: int, v: int):
    """Exact ``P(token ends at v)`` next to the interval-matrix entry."""
    x0 = [int(c) for c in x0]
    check_guard(x0, matchings)
    placements = token_placements(x0, matchings)
    prob = sum((p for loc, p in placements.items() if loc[token] == v), Fraction(0))
    start = [w for w, k in enumerate(x0) for _ in range(k)]
    entry = exact_interval_matrix(matchings, len(x0))[start[token]][v]
    return prob, entry


def _run_bits(x, matchings, bits):
    x = list(x)
    it = iter(bits)
    traj = []
    for m in matchings:
        for u, v in m.pairs:
            x[u], x[v] = _split_pair(x[u], x[v], next(it))
        traj.append(tuple(x))
    return traj


def check_mirror_coupling(x0, matchings, bits: Optional[Sequence[int]] = None) -> bool:
    """Reflection identity for one bit assignment, or for all of them."""
    x0 = [int(c) for c in x0]
    n = len(x0)
    if len(matchings) > MAX_ROUNDS or n > MAX_NODES:
        raise GuardError("instance exceeds the enumeration guard")
    c = 2 * (sum(x0) // n)
    mirror0 = [c - a for a in x0]
    k = sum(len(m) for m in matchings)
    assignments = [bits] if bits is not None else itertools.product((1, -1), repeat=k)
    for b in assignments:
        a = _run_bits(x0, matchings, b)
        r = _run_bits(mirror0, matchings, [-s for s in b])
        for xa, xr in zip(a, r):
            if any(c - p != q for p, q in zip(xa, xr)):
                return False
    return True


# --- manifest ---------------------------------------------------------------


@dataclass(frozen=True)
class Instance:
    id: str
    x0: tuple
    matchings: tuple


def load_manifest(path) -> list:
    data = load_toml(path)
    if data.get("schema_version") != 1:
        raise ValueError("unsupported manifest schema_version")
    return [
        Instance(
            inst["id"],
            tuple(inst["x0"]),
            tuple(Matching(tuple(tuple(p) for p in rnd)) for rnd in inst["matchings"]),
        )
        for inst in data["instance"]
    ]


def run_manifest(path) -> dict:
    """Every oracle check on every manifest instance, as a JSON-ready report."""
    results = []
    for inst in load_manifest(path):
        x0, ms = list(inst.x0), list(inst.matchings)
        a = enumerate_protocol(x0, ms, "rounding_error")
        b = enumerate_protocol(x0, ms, "token_urn")
        sweep = negative_correlation_sweep(x0, ms)
        marg_ok = all(
            p == e for i in range(sum(x0)) for v in range(len(x0)) for p, e in [check_marginal_law(x0, ms, i, v)]
        )
        checks = {
            "masses_sum_to_one": a.total() == 1 and b.total() == 1,
            "urn_equivalence": a.tv(b) == 0,
            "negative_correlation": sweep["violations"] == 0,
            "singleton_equality": sweep["singleton_mismatches"] == 0,
            "marginal_law": marg_ok,
            "mirror_coupling": check_mirror_coupling(x0, ms),
        }
        results.append({"id": inst.id, "checks": checks, "sweep": sweep, "pass": all(checks.values())})
    return {"instances": results, "pass": all(r["pass"] for r in results)}
