"""Graphs, edge colorings and spectral quantities."""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import rng as _rng

__all__ = [
    "Graph",
    "EdgeColoring",
    "SpectralReport",
    "ParameterError",
    "ValidationError",
    "build_family",
    "from_edges",
    "edge_coloring",
    "misra_gries",
    "spectral",
    "conductance",
    "read_edge_list",
    "write_edge_list",
    "parse_family",
]

DENSE_CAP = 4096


class ParameterError(ValueError):
    pass


class ValidationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected, connected, simple graph on nodes ``0..n-1``.

    ``family`` and ``params`` remember how the graph was built so that
    structured families can get their canonical edge colorings.
    """

    n: int
    adjacency: tuple
    family: str = "custom"
    params: tuple = ()
    edges: np.ndarray = field(init=False, repr=False)
    degrees: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        adj = tuple(tuple(sorted(set(nb))) for nb in self.adjacency)
        if len(adj) != self.n:
            raise ValidationError("adjacency length does not match n")
        for u, nb in enumerate(adj):
            for v in nb:
                if v == u:
                    raise ValidationError(f"self-loop at {u}")
                if not 0 <= v < self.n or u not in adj[v]:
                    raise ValidationError(f"asymmetric adjacency at ({u},{v})")
        object.__setattr__(self, "adjacency", adj)
        edges = [(u, v) for u in range(self.n) for v in adj[u] if u < v]
        e = np.array(edges, dtype=np.int64).reshape(-1, 2)
        e.setflags(write=False)
        deg = np.array([len(nb) for nb in adj], dtype=np.int64)
        deg.setflags(write=False)
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "degrees", deg)
        if self.n >= 2 and not self._connected():
            raise ValidationError("graph is not connected")

    @property
    def m(self) -> int:
        return len(self.edges)

    @property
    def max_degree(self) -> int:
        return int(self.degrees.max()) if self.n else 0

    @property
    def is_regular(self) -> bool:
        return bool(self.n and (self.degrees == self.degrees[0]).all())

    def _bfs(self, src: int) -> list:
        dist = [-1] * self.n
        dist[src] = 0
        q = deque([src])
        while q:
            u = q.popleft()
            for v in self.adjacency[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    q.append(v)
        return dist

    def _connected(self) -> bool:
        return min(self._bfs(0)) >= 0

    def diameter(self) -> int:
        return max(max(self._bfs(s)) for s in range(self.n))

    def ball(self, u: int, r: int) -> list:
        """Nodes within hop distance ``r`` of ``u``."""
        dist = self._bfs(u)
        return [v for v in range(self.n) if 0 <= dist[v] <= r]

    def has_edge(self, u: int, v: int) -> bool:
        return v in self.adjacency[u]

    def laplacian(self) -> np.ndarray:
        L = np.diag(self.degrees.astype(float))
        L[self.edges[:, 0], self.edges[:, 1]] = -1.0
        L[self.edges[:, 1], self.edges[:, 0]] = -1.0
        return L

    def neighbor_table(self) -> np.ndarray:
        """``(n, Δ)`` neighbour table padded with the node itself."""
        tab = np.repeat(np.arange(self.n)[:, None], max(self.max_degree, 1), axis=1)
        for u, nb in enumerate(self.adjacency):
            tab[u, : len(nb)] = nb
        return tab


def from_edges(n: int, edges, family: str = "custom", params: tuple = ()) -> Graph:
    adj = [[] for _ in range(n)]
    for u, v in edges:
        u, v = int(u), int(v)
        if u == v:
            raise ValidationError(f"self-loop at {u}")
        adj[u].append(v)
        adj[v].append(u)
    for nb in adj:
        if len(nb) != len(set(nb)):
            raise ValidationError("parallel edges")
    return Graph(n, tuple(adj), family, tuple(params))


def _torus_coord_edges(r: int, side: int):
    n = side**r
    edges = set()
    for x in range(n):
        for a in range(r):
            stride = side**a
            xa = (x // stride) % side
            y = x - xa * stride + ((xa + 1) % side) * stride
            if x != y:
                edges.add((min(x, y), max(x, y)))
    return n, sorted(edges)


def _regular_pairs(n: int, d: int, gen, max_switches: int):
    """Edge list of a simple d-regular graph drawn by pairing, or None.

    A random pairing of the ``n*d`` points is drawn and loops or repeated
    pairs are repaired by random switches with other pairs.
    """
    points = np.repeat(np.arange(n), d)
    gen.shuffle(points)
    pairs = points.reshape(-1, 2).copy()
    m = len(pairs)

    def key(a, b):
        return (min(a, b), max(a, b))

    counts: dict = {}
    for a, b in pairs.tolist():
        counts[key(a, b)] = counts.get(key(a, b), 0) + 1

    def bad(i):
        a, b = pairs[i]
        return a == b or counts[key(a, b)] > 1

    for _ in range(max_switches):
        todo = [i for i in range(m) if bad(i)]
        if not todo:
            return [key(a, b) for a, b in pairs.tolist()]
        i = todo[int(gen.integers(len(todo)))]
        j = int(gen.integers(m))
        if j == i:
            continue
        a, b = pairs[i]
        c, e = pairs[j]
        if gen.integers(2):
            c, e = e, c
        new1, new2 = key(a, c), key(b, e)
        if a == c or b == e or new1 == new2 or counts.get(new1, 0) or counts.get(new2, 0):
            continue
        for old in (key(a, b), key(pairs[j][0], pairs[j][1])):
            counts[old] -= 1
            if not counts[old]:
                del counts[old]
        pairs[i] = new1
        pairs[j] = new2
        counts[new1] = counts[new2] = 1
    return None


def _random_regular(n: int, d: int, seed: int, max_attempts: int = 1000) -> Graph:
    """Random simple d-regular graph, redrawn until connected.

    Dense cases (``2d > n``) draw the sparse complement and invert it.
    """
    if n * d % 2 or d >= n or d < 1:
        raise ParameterError(f"no simple {d}-regular graph on {n} nodes")
    gen = _rng.stream(seed, 0, "graph")
    dense = 2 * d > n
    k = n - 1 - d if dense else d
    for _ in range(max_attempts):
        edges = _regular_pairs(n, k, gen, 1000 * n * max(k, 1)) if k else []
        if edges is None:
            continue
        if dense:
            comp = set(edges)
            edges = [(a, b) for a in range(n) for b in range(a + 1, n) if (a, b) not in comp]
        try:
            return from_edges(n, edges, "random_regular", (n, d))
        except ValidationError:
            continue
    raise ParameterError(f"random_regular({n},{d}) failed after {max_attempts} attempts")


def build_family(family: str, *params: int, seed: int = 0) -> Graph:
    """Build one of the standard families.

    ``cycle(n)``, ``torus(r, side)``, ``hypercube(dim)``,
    ``random_regular(n, d)``, ``complete(n)``, ``path(n)`` and ``star(n)``
    (one centre joined to ``n-1`` leaves).
    """
    params = tuple(int(p) for p in params)
    if family == "cycle":
        (n,) = params
        if n < 3:
            raise ParameterError("cycle needs n >= 3")
        _, edges = _torus_coord_edges(1, n)
        return from_edges(n, edges, "cycle", params)
    if family == "torus":
        r, side = params
        if r < 1 or side < 2:
            raise ParameterError("torus needs r >= 1, side >= 2")
        n, edges = _torus_coord_edges(r, side)
        return from_edges(n, edges, "torus", params)
    if family == "hypercube":
        (dim,) = params
        if dim < 1:
            raise ParameterError("hypercube needs dim >= 1")
        n = 1 << dim
        edges = [(x, x | (1 << a)) for a in range(dim) for x in range(n) if not x >> a & 1]
        return from_edges(n, edges, "hypercube", params)
    if family == "random_regular":
        n, d = params
        return _random_regular(n, d, seed)
    if family == "complete":
        (n,) = params
        if n < 2:
            raise ParameterError("complete needs n >= 2")
        return from_edges(n, itertools.combinations(range(n), 2), "complete", params)
    if family == "path":
        (n,) = params
        if n < 2:
            raise ParameterError("path needs n >= 2")
        return from_edges(n, [(i, i + 1) for i in range(n - 1)], "path", params)
    if family == "star":
        (n,) = params
        if n < 2:
            raise ParameterError("star needs n >= 2")
        return from_edges(n, [(0, i) for i in range(1, n)], "star", params)
    raise ParameterError(f"unknown family {family!r}")


def parse_family(text: str, seed: int = 0) -> Graph:
    """Parse ``"torus(2,16)"`` style descriptors."""
    text = text.strip()
    name, _, rest = text.partition("(")
    args = [int(a) for a in rest.rstrip(")").split(",") if a.strip()]
    return build_family(name.strip(), *args, seed=seed)


# --- edge colorings -------------------------------------------------------


@dataclass(frozen=True)
class EdgeColoring:
    colors: tuple  # tuple of tuples of (u, v) pairs with u < v

    @property
    def d(self) -> int:
        return len(self.colors)


def _canonical_torus(r: int, side: int):
    n = side**r
    classes = []
    for a in range(r):
        stride = side**a
        buckets = {"even": [], "odd": [], "wrap": []}
        for x in range(n):
            xa = (x // stride) % side
            y = x - xa * stride + ((xa + 1) % side) * stride
            if side == 2 and xa == 1:
                continue  # the wrap edge duplicates the forward edge
            if xa == side - 1 and side % 2:
                key = "wrap"
            else:
                key = "even" if xa % 2 == 0 else "odd"
            buckets[key].append((min(x, y), max(x, y)))
        classes.extend(sorted(b) for b in buckets.values() if b)
    return classes


def _even_side(g: Graph) -> bool:
    side = g.params[1] if g.family == "torus" else g.params[0]
    return side % 2 == 0


def misra_gries(g: Graph) -> list:
    """Proper edge coloring with at most Δ+1 colors."""
    ncol = g.max_degree + 1
    col = {}  # frozen (u, v) -> color
    at = [dict() for _ in range(g.n)]  # at[x][c] = neighbour joined by colour c

    def key(a, b):
        return (a, b) if a < b else (b, a)

    def free(x, c):
        return c not in at[x]

    def set_color(a, b, c):
        old = col.get(key(a, b))
        if old is not None:
            del at[a][old]
            del at[b][old]
        if c is None:
            col.pop(key(a, b), None)
            return
        col[key(a, b)] = c
        at[a][c] = b
        at[b][c] = a

    def first_free(x):
        return next(c for c in range(ncol) if free(x, c))

    for u, v in g.edges.tolist():
        fan = [v]
        in_fan = {v}
        grown = True
        while grown:
            grown = False
            for w in g.adjacency[u]:
                if w in in_fan:
                    continue
                c = col.get(key(u, w))
                if c is not None and free(fan[-1], c):
                    fan.append(w)
                    in_fan.add(w)
                    grown = True
                    break
        c = first_free(u)
        d = first_free(fan[-1])
        # invert the cd-path that starts at u
        path_edges = []
        x, want = u, d
        while want in at[x]:
            y = at[x][want]
            path_edges.append((x, y, want))
            x, want = y, (c if want == d else d)
        for a, b, _ in path_edges:
            set_color(a, b, None)
        for a, b, cc in path_edges:
            set_color(a, b, c if cc == d else d)
        # pick w in fan with d free such that the prefix is still a fan
        k = None
        for i, w in enumerate(fan):
            if i > 0:
                ci = col.get(key(u, w))
                if ci is None or not free(fan[i - 1], ci):
                    break
            if free(w, d):
                k = i
                break
        if k is None:
            raise RuntimeError("Misra-Gries invariant violated")
        for i in range(k):
            nxt = col[key(u, fan[i + 1])]
            set_color(u, fan[i + 1], None)
            set_color(u, fan[i], nxt)
        set_color(u, fan[k], d)

    classes = [[] for _ in range(ncol)]
    for (a, b), c in col.items():
        classes[c].append((a, b))
    return [sorted(cl) for cl in classes if cl]


def edge_coloring(g: Graph, method: str = "auto") -> EdgeColoring:
    """Partition the edges into matchings.

    Hypercubes get their dimension matchings in index order, cycles and tori
    with an even side the axis-parity classes, and everything else the
    Misra-Gries coloring (odd sides would need a third class per axis).
    """
    if method == "auto" and g.family == "hypercube":
        dim = g.params[0]
        classes = [
            [(x, x | (1 << a)) for x in range(g.n) if not x >> a & 1] for a in range(dim)
        ]
    elif method == "auto" and g.family in ("torus", "cycle") and _even_side(g):
        r, side = g.params if g.family == "torus" else (1, g.params[0])
        classes = _canonical_torus(r, side)
    elif method in ("auto", "misra_gries"):
        classes = misra_gries(g)
    else:
        raise ParameterError(f"unknown coloring method {method!r}")
    return EdgeColoring(tuple(tuple(map(tuple, c)) for c in classes))


# --- spectra ---------------------------------------------------------------


@dataclass(frozen=True)
class SpectralReport:
    eigenvalues: np.ndarray
    lambda_M: Optional[float] = None
    lambda2_P: Optional[float] = None
    lambda_P: Optional[float] = None
    spectral_gap: float = 0.0
    conductance: Optional[float] = None
    cheeger_ok: Optional[bool] = None
    symmetric: bool = True


def _check_stochastic(A: np.ndarray) -> None:
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValidationError("matrix must be square")
    if (A < -1e-12).any() or np.abs(A.sum(axis=1) - 1).max() > 1e-9:
        raise ValidationError("matrix is not row-stochastic")


def _power_lambda(A: np.ndarray, signed: bool, iters: int = 5000, seed: int = 0) -> float:
    n = A.shape[0]
    B = (A + np.eye(n)) / 2 if signed else A
    x = np.random.default_rng(seed).standard_normal(n)
    est = 0.0
    for _ in range(iters):
        x -= x.mean()
        y = x @ B if not signed else B @ x
        y -= y.mean()
        nrm = np.linalg.norm(y)
        if nrm == 0:
            return 0.0 if not signed else -1.0
        est_new = nrm / np.linalg.norm(x)
        x = y / nrm
        if abs(est_new - est) < 1e-13:
            est = est_new
            break
        est = est_new
    return 2 * est - 1 if signed else est


def _eigs(A: np.ndarray):
    sym = np.allclose(A, A.T, atol=1e-12)
    if sym:
        return np.sort(np.linalg.eigvalsh(A))[::-1], True
    ev = np.linalg.eigvals(A)
    return ev[np.argsort(-np.abs(ev))], False


def _nontrivial_magnitude(ev: np.ndarray) -> float:
    """Largest eigenvalue magnitude once one copy of the eigenvalue 1 is removed."""
    idx = int(np.argmin(np.abs(ev - 1)))
    rest = np.delete(ev, idx)
    return float(np.abs(rest).max()) if rest.size else 0.0


def conductance(g: Graph, gamma: float = 2.0, exact_cap: int = 20) -> float:
    """min over |S| <= n/2 of |E(S, S^c)| / (γΔ|S|).

    Exact by subset enumeration up to ``exact_cap`` nodes; above that the
    connectivity lower bound ``1/(γΔ⌊n/2⌋)`` is returned.
    """
    n, delta = g.n, g.max_degree
    if n > exact_cap:
        return 1.0 / (gamma * delta * (n // 2))
    eu, ev = g.edges[:, 0], g.edges[:, 1]
    best = np.inf
    for mask in range(1, 1 << n):
        size = bin(mask).count("1")
        if size > n // 2:
            continue
        side = (mask >> np.arange(n)) & 1
        cut = int((side[eu] != side[ev]).sum())
        best = min(best, cut / (gamma * delta * size))
    return float(best)


def spectral(
    g: Graph,
    round_matrix: Optional[np.ndarray] = None,
    gamma: Optional[float] = None,
    cap: int = DENSE_CAP,
) -> SpectralReport:
    """Eigen-magnitudes of a round matrix or of the diffusion matrix P(γ).

    Products of non-commuting matchings are not symmetric; their spectrum is
    taken from a general eigensolve and magnitudes are reported.
    """
    if (round_matrix is None) == (gamma is None):
        raise ValueError("give exactly one of round_matrix or gamma")
    if round_matrix is not None:
        A = np.asarray(round_matrix, dtype=float)
        _check_stochastic(A)
        if A.shape[0] > cap:
            lam = _power_lambda(A, signed=False)
            return SpectralReport(np.array([]), lambda_M=lam, spectral_gap=1 - lam, symmetric=False)
        ev, sym = _eigs(A)
        lam = min(_nontrivial_magnitude(ev), 1.0)
        return SpectralReport(ev, lambda_M=lam, spectral_gap=1 - lam, symmetric=sym)

    P = np.eye(g.n) - g.laplacian() / (gamma * g.max_degree)
    _check_stochastic(P)
    if g.n > cap:
        lam2 = _power_lambda(P, signed=True)
        lam = _power_lambda(P, signed=False)
        ev = np.array([])
    else:
        ev = np.sort(np.linalg.eigvalsh(P))[::-1]
        lam2 = float(ev[1]) if g.n > 1 else 0.0
        lam = float(max(abs(ev[1]), abs(ev[-1]))) if g.n > 1 else 0.0
    phi = conductance(g, gamma)
    ok = lam2 <= 1 - phi**2 / 2 + 1e-9
    return SpectralReport(
        ev, lambda2_P=lam2, lambda_P=lam, spectral_gap=1 - lam, conductance=phi, cheeger_ok=ok
    )


# --- edge-list I/O ---------------------------------------------------------


def write_edge_list(g: Graph, path) -> None:
    lines = [f"{g.n} {g.m}"] + [f"{u} {v}" for u, v in g.edges.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_edge_list(path) -> Graph:
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    n, m = int(rows[0][0]), int(rows[0][1])
    edges = [(int(a), int(b)) for a, b in rows[1:]]
    if len(edges) != m:
        raise ValidationError(f"header says {m} edges, found {len(edges)}")
    return from_edges(n, edges, "custom", ())
