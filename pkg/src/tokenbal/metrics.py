"""Discrepancy, divergences, smoothing times, potentials and diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .graph import Graph, spectral
from .schedule import Matching, MatchingSchedule, interval_matrix

__all__ = [
    "DivergenceReport",
    "SmoothingEstimate",
    "PotentialReport",
    "DiagnosticsReport",
    "CapExceeded",
    "discrepancy",
    "psi_p_matching",
    "largetime_terms",
    "psi2_upsilon2_diffusion",
    "smoothing_time",
    "potentials",
    "quadratic_potential",
    "polynomial_potential",
    "exponential_potential",
    "diagnostics",
    "e_ell_membership",
    "circuit_smoothing_bound",
    "random_smoothing_bound",
    "diffusion_smoothing_bound",
    "quadratic_decay_bound",
    "matching_deviation_bound",
    "edge_deviation_bound",
    "diffusion_psi2_bounds",
]


class CapExceeded(RuntimeError):
    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


def discrepancy(x) -> float:
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("discrepancy of an empty vector")
    return x.max() - x.min()


# --- local divergence, matching model ---------------------------------------


@dataclass(frozen=True)
class DivergenceReport:
    psi_p: float
    p: float
    model: str
    horizon: int
    argmax_t: Optional[int] = None
    argmax_w: Optional[int] = None
    tail_bound: float = 0.0
    converged: bool = True
    upsilon_p: Optional[float] = None
    upsilon_upper: Optional[float] = None
    telescoping_error: Optional[float] = None
    spectral_tail: bool = False
    per_node: Optional[np.ndarray] = field(default=None, repr=False)


STACK_BUDGET = 2e7


def _divergence_chunk(matchings, n, p, lo, hi, check):
    """Divergence sums for the horizons ``lo+1 .. hi``.

    ``stack[k]`` holds ``M^{[s+1, lo+k+1]}``; horizons shorter than ``s``
    stay at the identity until the sweep reaches them.
    """
    stack = np.repeat(np.eye(n)[None], hi - lo, axis=0)
    S = np.zeros((hi - lo, n))
    tele = 0.0
    for s in range(hi, 0, -1):
        m = matchings[s - 1]
        if not len(m):
            continue
        first = max(s - 1 - lo, 0)
        B = stack[first:]
        diff = B[:, m.us, :] - B[:, m.vs, :]
        contrib = (diff**2 if p == 2 else np.abs(diff) ** p).sum(axis=1)
        S[first:] += contrib
        if check:
            before = ((B - 1.0 / n) ** 2).sum(axis=1)
        avg = (B[:, m.us, :] + B[:, m.vs, :]) / 2
        B[:, m.us, :] = avg
        B[:, m.vs, :] = avg
        if check:
            after = ((B - 1.0 / n) ** 2).sum(axis=1)
            tele = max(tele, float(np.abs((before - after) - contrib / 2).max()))
    return S, tele


def psi_p_matching(
    matchings: Sequence[Matching],
    n: int,
    p: float = 2,
    w: Optional[int] = None,
    check_telescoping: bool = False,
) -> DivergenceReport:
    """Local p-divergence of a finite matching sequence.

    For each horizon ``t`` the backward products ``B = M^{[s+1,t]}`` are built
    for ``s = t, t-1, ..., 1`` and the pair differences ``B[u,w] - B[v,w]``
    are accumulated; horizons are advanced together in stacked chunks.

    With ``check_telescoping`` (p = 2 only) every step also verifies that
    half the squared differences equal the drop of
    ``sum_u (B[u,w] - 1/n)^2`` and reports the largest discrepancy.
    """
    T = len(matchings)
    if T == 0 or all(len(m) == 0 for m in matchings):
        return DivergenceReport(0.0, p, "matching", T, tail_bound=0.0, telescoping_error=0.0 if check_telescoping else None)
    S = np.zeros((T, n))
    tele = 0.0
    chunk = max(1, int(STACK_BUDGET // (n * n)))
    for lo in range(0, T, chunk):
        hi = min(T, lo + chunk)
        S[lo:hi], err = _divergence_chunk(matchings, n, p, lo, hi, check_telescoping)
        tele = max(tele, err)
    cols = slice(None) if w is None else [w]
    Sw = S[:, cols]
    k, j = np.unravel_index(int(np.argmax(Sw)), Sw.shape)
    psi = float(Sw[k, j] ** (1.0 / p))
    # everything a longer horizon could still add is bounded by twice the
    # remaining potential of the full product
    full = interval_matrix(matchings, n).matrix
    tail = float((2 * ((full - 1.0 / n) ** 2).sum(axis=0))[cols].max())
    return DivergenceReport(
        psi,
        p,
        "matching",
        T,
        argmax_t=int(k + 1),
        argmax_w=int(j if w is None else w),
        tail_bound=tail,
        converged=tail < 1e-12,
        telescoping_error=tele if check_telescoping else None,
        per_node=S.max(axis=0) ** (1.0 / p),
    )


def largetime_terms(matchings: Sequence[Matching], n: int, t1: int):
    """Prefix divergence up to ``t1`` with horizon ``len(matchings)``, and twice
    the potential of ``M^{[t1+1, t2]}``; both per node."""
    t2 = len(matchings)
    B = np.eye(n)
    prefix = np.zeros(n)
    bound = None
    for s in range(t2, 0, -1):
        if s == t1:
            bound = 2 * ((B - 1.0 / n) ** 2).sum(axis=0)
        m = matchings[s - 1]
        if s <= t1 and len(m):
            prefix += ((B[m.us] - B[m.vs]) ** 2).sum(axis=0)
        avg = (B[m.us] + B[m.vs]) / 2
        B[m.us] = avg
        B[m.vs] = avg
    if bound is None:
        bound = 2 * ((B - 1.0 / n) ** 2).sum(axis=0)
    return prefix, bound


# --- local divergence, diffusion ----------------------------------------------


def diffusion_psi2_bounds(delta: int, gamma: float):
    """``(sqrt(Δ), sqrt(γΔ/(2-2/γ)), sqrt((1+Δ)/2))``."""
    upper = math.sqrt(gamma * delta / (2 - 2 / gamma)) if gamma > 1 else math.inf
    return math.sqrt(delta), upper, math.sqrt((1 + delta) / 2)


def psi2_upsilon2_diffusion(
    g: Graph,
    gamma: float,
    p: float = 2,
    T: Optional[int] = None,
    cap: int = 2000,
    tol: float = 1e-12,
) -> DivergenceReport:
    """Ψ_p and Υ_p of the diffusion matrix by iterating ``P^t``.

    The sum runs until ``λ(P)^{2t} <= tol`` or ``cap`` rounds. If the cap is
    hit and ``p = 2``, the remaining part of Ψ₂² is added exactly from the
    eigendecomposition of P (``spectral_tail=True``); Υ is then only a lower
    bound, with ``upsilon_upper`` adding the same remainder.
    """
    n, delta = g.n, g.max_degree
    P = np.eye(n) - g.laplacian() / (gamma * delta)
    mu, phi = np.linalg.eigh(P)
    lam = float(max(abs(mu[0]), abs(mu[-2]))) if n > 1 else 0.0
    if T is None:
        if lam == 0:
            T = 1
        elif lam < 1:
            T = int(math.ceil(math.log(tol) / (2 * math.log(lam))))
        else:
            T = cap + 1
    steps = min(T, cap)
    eu, ev = g.edges[:, 0], g.edges[:, 1]
    nbr = g.neighbor_table()
    Q = np.eye(n)
    psi_sum = np.zeros(n)
    ups_sum = np.zeros(n)
    for _ in range(steps):
        d = Q[:, eu] - Q[:, ev]
        psi_sum += (np.abs(d) ** p).sum(axis=1)
        dn = np.abs(Q[:, :, None] - Q[:, nbr]) ** p
        ups_sum += 0.5 * dn.max(axis=2).sum(axis=1)
        Q = Q @ P
    resid = ((Q - 1.0 / n) ** 2).sum(axis=1)
    converged = steps >= T
    tail = 2 * delta * resid / (1 - lam**2) if lam < 1 else np.full(n, np.inf)
    spectral_tail = False
    total = psi_sum
    if not converged and p == 2:
        nontrivial = np.abs(mu - 1) > 1e-12
        weights = gamma * delta * mu[nontrivial] ** (2 * steps) / (1 + mu[nontrivial])
        exact_tail = (phi[:, nontrivial] ** 2) @ weights
        total = psi_sum + exact_tail
        tail = exact_tail
        spectral_tail = True
    w = int(np.argmax(total))
    return DivergenceReport(
        float(total.max() ** (1 / p)),
        p,
        "diffusion",
        steps,
        argmax_w=w,
        tail_bound=float(tail.max()),
        converged=converged,
        upsilon_p=float(ups_sum.max() ** (1 / p)),
        upsilon_upper=float((ups_sum + tail).max() ** (1 / p)),
        spectral_tail=spectral_tail,
        per_node=total ** (1 / p),
    )


# --- smoothing ----------------------------------------------------------------


@dataclass(frozen=True)
class SmoothingEstimate:
    K: float
    eps: float
    tau: int
    bound_tau: float
    tau_certified: Optional[int] = None
    tau_exact: Optional[int] = None
    tau_probe: Optional[int] = None
    method: str = "certified"
    per_replica: Optional[list] = None


def circuit_smoothing_bound(d: int, lam: float, K: float, n: int, eps: float) -> float:
    if eps <= 0 or lam >= 1:
        return math.inf
    return d * 4 / (1 - lam) * math.log(K * n / eps)


def random_smoothing_bound(d: int, p_min: float, lam2: float, K: float, n: int, eps: float) -> float:
    if eps <= 0 or lam2 >= 1:
        return math.inf
    return 8 / (d * p_min) / (1 - lam2) * math.log(K * n * n / (eps / 2))


def diffusion_smoothing_bound(lam: float, K: float, n: int, eps: float) -> float:
    if eps <= 0 or lam >= 1:
        return math.inf
    return 2 / (1 - lam) * math.log(K * n * n / eps)


def _smoothing_scan(matching_at, n, K, eps, cap, exact_cap, atol):
    """First rounds at which the certificate, the exact worst case and the
    spike probes reach ``eps``."""
    C = np.eye(n)
    found = {"certified": None, "exact": None if n <= exact_cap else -1, "probe": None}

    def done():
        return all(v is not None for v in found.values())

    t = 0
    while True:
        if found["probe"] is None and K * (C.max(axis=1) - C.min(axis=1)).max() <= eps + atol:
            found["probe"] = t
        if found["certified"] is None and K * np.abs(C - 1.0 / n).sum(axis=0).max() <= eps + atol:
            found["certified"] = t
        if found["exact"] is None:
            worst = max(np.abs(C - C[:, u : u + 1]).sum(axis=0).max() for u in range(n)) / 2
            if K * worst <= eps + atol:
                found["exact"] = t
        if done() or t >= cap:
            break
        t += 1
        m = matching_at(t)
        avg = (C[:, m.us] + C[:, m.vs]) / 2
        C[:, m.us] = avg
        C[:, m.vs] = avg
    if found["exact"] == -1:
        found["exact"] = None
        if found["certified"] is None or found["probe"] is None:
            raise CapExceeded(f"smoothing not reached within {cap} rounds", found)
    elif not done():
        raise CapExceeded(f"smoothing not reached within {cap} rounds", found)
    return found


def smoothing_time(
    schedule: MatchingSchedule,
    K: float,
    eps: float,
    cap: int = 100000,
    exact_cap: int = 128,
    replicas: int = 0,
    p_min: Optional[float] = None,
    atol: float = 1e-12,
) -> SmoothingEstimate:
    """Smallest ``t`` such that rounds ``1..t`` are (K, eps)-smoothing.

    The continuous result of a start vector with discrepancy ``K`` has
    discrepancy at most ``K * max_{u,u'} TV(M[:,u], M[:,u'])`` with
    ``M = M^{[1,t]}``, and that worst case is attained, so for ``n <=
    exact_cap`` the time is exact. The sufficient test ``K * max_u
    ||M[:,u] - 1/n||_1 <= eps`` is always reported, as are spike probes
    ``K e_v`` which give a lower bound.

    In random mode the schedule seed is varied over ``replicas`` runs and
    the ``(1 - 1/n)``-quantile of the per-run times is returned.
    """
    g = schedule.graph
    n = g.n
    if schedule.mode == "circuit":
        f = _smoothing_scan(schedule.matching_at, n, K, eps, cap, exact_cap, atol)
        lam = spectral(g, round_matrix=schedule.round_matrix()).lambda_M
        bound = circuit_smoothing_bound(schedule.d, lam, K, n, eps)
        tau = f["exact"] if f["exact"] is not None else f["certified"]
        return SmoothingEstimate(
            K, eps, tau, bound, f["certified"], f["exact"], f["probe"],
            "exact" if f["exact"] is not None else "certified",
        )
    replicas = replicas or max(2 * n, 20)
    per = []
    for r in range(replicas):
        s = MatchingSchedule(g, "random", seed=schedule.seed + r, edge_prob=schedule.edge_prob)
        f = _smoothing_scan(s.matching_at, n, K, eps, cap, exact_cap, atol)
        per.append(f["exact"] if f["exact"] is not None else f["certified"])
    tau = int(np.quantile(per, 1 - 1 / n, method="higher"))
    lam2 = spectral(g, gamma=2.0).lambda2_P
    if p_min is None:
        p_min = (1 / (2 * g.max_degree)) * (1 - 1 / (2 * g.max_degree)) ** (2 * g.max_degree - 2)
    bound = random_smoothing_bound(g.max_degree, p_min, lam2, K, n, eps)
    return SmoothingEstimate(K, eps, tau, bound, method="quantile", per_replica=per)


# --- potentials -------------------------------------------------------------


@dataclass(frozen=True)
class PotentialReport:
    quadratic: float
    polynomial: int
    exponential: float
    log_exponential: float
    eps: float
    rate: float
    poly_threshold: int = 11
    exp_threshold: int = 2


def quadratic_potential(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(((x - x.mean()) ** 2).sum())


def polynomial_potential(x, threshold: int = 11, power: int = 8) -> int:
    return sum(int(v) ** power for v in np.asarray(x).tolist() if v >= threshold)


def exponential_rate(n: int, eps: float = 0.25) -> float:
    return math.log(n) ** (1 - eps) / 8


def exponential_potential(x, eps: float = 0.25, threshold: int = 2, rate: Optional[float] = None):
    """``(value, log value)`` of ``sum_{x_u >= threshold} exp(a x_u)``.

    ``a`` defaults to ``(log n)^(1-eps) / 8``. Balancing a pair can raise
    the sum while ``a < log 2`` (e.g. ``(3, 1) -> (2, 2)``), which is the
    case for every ``n`` below roughly 18000 at ``eps = 0.25``.
    """
    x = np.asarray(x)
    a = exponential_rate(len(x), eps) if rate is None else rate
    z = a * x[x >= threshold].astype(float)
    if z.size == 0:
        return 0.0, -math.inf
    top = z.max()
    log_val = float(top + math.log(np.exp(z - top).sum()))
    return (math.exp(log_val) if log_val < 709 else math.inf), log_val


def potentials(x, eps: float = 0.25, poly_threshold: int = 11, exp_threshold: int = 2) -> PotentialReport:
    x = np.asarray(x)
    val, log_val = exponential_potential(x, eps, exp_threshold)
    return PotentialReport(
        quadratic_potential(x),
        polynomial_potential(x, poly_threshold),
        val,
        log_val,
        eps,
        exponential_rate(len(x), eps),
        poly_threshold,
        exp_threshold,
    )


# --- diagnostics --------------------------------------------------------------


@dataclass(frozen=True)
class DiagnosticsReport:
    S1: frozenset
    S2: frozenset
    S3: frozenset
    bad: frozenset
    ball_loads: np.ndarray
    neighborhood_loads: np.ndarray
    E_t: bool
    F_t: bool
    radius: int


def diagnostics(
    x,
    window: np.ndarray,
    g: Graph,
    eps_t: float = 0.25,
    eps: float = 0.25,
    r: Optional[int] = None,
    load_threshold: int = 11,
    expected_threshold: float = 4.0,
    norm_exponent_div: float = 7.0,
    ball_factor: float = 16.0,
) -> DiagnosticsReport:
    """Node sets and events for a load vector and a window matrix ``W``.

    S1: ``x_u >= 11``. S2: ``||W[u,:]||^2 <= (log n)^(-eps_t/7)``.
    S3: ``sum_w W[u,w] * (x W)_w >= 4``, i.e. the expected load met by a
    walk started at ``u``. Bad nodes are ``S2 & S3``. ``E_t`` asks every
    ball of radius ``r`` to carry at most ``16 (log n)^eps`` tokens and
    ``F_t`` every neighbourhood at most ``Δ/2``.
    """
    x = np.asarray(x)
    n = len(x)
    logn = math.log(n)
    W = np.asarray(window, dtype=float)
    S1 = frozenset(np.nonzero(x >= load_threshold)[0].tolist())
    S2 = frozenset(np.nonzero((W**2).sum(axis=1) <= logn ** (-eps_t / norm_exponent_div))[0].tolist())
    expected = W @ (x @ W)
    S3 = frozenset(np.nonzero(expected >= expected_threshold - 1e-12)[0].tolist())
    if r is None:
        r = max(1, int(logn ** (1 / 3)))
    balls = np.array([x[g.ball(u, r)].sum() for u in range(n)])
    neigh = np.array([x[list(g.adjacency[u])].sum() for u in range(n)])
    return DiagnosticsReport(
        S1, S2, S3, S2 & S3, balls, neigh,
        bool((balls <= ball_factor * logn**eps).all()),
        bool((neigh <= g.max_degree / 2).all()),
        r,
    )


def e_ell_membership(x, ell: int, eps: float) -> bool:
    x = np.asarray(x, dtype=float)
    n = len(x)
    logn = math.log(n)
    cut = 8 * ell * math.ceil(logn**eps) + ell
    excess = np.maximum(x - cut, 0).sum()
    return bool(excess <= 4 * n * math.exp(-0.25 * logn ** (ell * eps)))


# --- other analytic bounds ----------------------------------------------------


def quadratic_decay_bound(d: int, p_min: float, lam2: float, t: int) -> float:
    return (1 - d * p_min / 4 * (1 - lam2)) ** t


def matching_deviation_bound(n: int, delta: float = 3.0) -> float:
    return math.sqrt(4 * delta * math.log(n)) + 1


def edge_deviation_bound(n: int, delta: int, gamma: float) -> float:
    return 4 * math.sqrt(math.log(n)) * diffusion_psi2_bounds(delta, gamma)[1]
