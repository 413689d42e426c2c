"""Property-based checks of the structural invariants."""

import math

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from tokenbal import rng
from tokenbal.diffusion import DiffusionMatrix, edge_based_round, vertex_based_round
from tokenbal.graph import build_family, conductance, edge_coloring, spectral
from tokenbal.matching_process import (
    CanonicalPathTrace,
    LoadState,
    TokenState,
    canonical_step,
    continuous_round,
    discrete_round,
    normalize,
    token_round,
)
from tokenbal.metrics import largetime_terms, polynomial_potential, psi_p_matching, quadratic_potential
from tokenbal.oracle import check_mirror_coupling, enumerate_protocol, negative_correlation_sweep
from tokenbal.schedule import Matching, MatchingSchedule, interval_matrix

settings.register_profile("ci", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


@st.composite
def graphs(draw, max_n=24):
    kind = draw(st.sampled_from(["cycle", "torus", "hypercube", "random_regular", "path", "star", "complete"]))
    if kind == "cycle":
        return build_family("cycle", draw(st.integers(3, max_n)))
    if kind == "torus":
        r = draw(st.integers(1, 2))
        return build_family("torus", r, draw(st.integers(3, 5)))
    if kind == "hypercube":
        return build_family("hypercube", draw(st.integers(1, 4)))
    if kind == "random_regular":
        n = draw(st.integers(4, max_n))
        d = draw(st.integers(1, min(n - 1, 6)).filter(lambda d: n * d % 2 == 0 and (d > 1 or n == 2)))
        return build_family("random_regular", n, d, seed=draw(st.integers(0, 1000)))
    if kind == "path":
        return build_family("path", draw(st.integers(2, max_n)))
    if kind == "star":
        return build_family("star", draw(st.integers(3, 10)))
    return build_family("complete", draw(st.integers(2, 7)))


@st.composite
def runs(draw, max_n=16):
    g = draw(graphs(max_n))
    mode = draw(st.sampled_from(["circuit", "random"]))
    seed = draw(st.integers(0, 2**31))
    sched = MatchingSchedule(g, mode, seed=seed)
    x0 = np.array(draw(st.lists(st.integers(-50, 200), min_size=g.n, max_size=g.n)), dtype=np.int64)
    return g, sched, seed, x0


def bfs_all(g):
    seen, todo = {0}, [0]
    while todo:
        u = todo.pop()
        for v in g.adjacency[u]:
            if v not in seen:
                seen.add(v)
                todo.append(v)
    return len(seen) == g.n


@given(graphs())
def test_graph_invariants(g):
    assert bfs_all(g)
    for u in range(g.n):
        assert u not in g.adjacency[u]
        assert len(set(g.adjacency[u])) == len(g.adjacency[u])
        for v in g.adjacency[u]:
            assert u in g.adjacency[v]
    assert g.max_degree == max(len(a) for a in g.adjacency)
    assert g.is_regular == (len({len(a) for a in g.adjacency}) == 1)


@given(graphs())
def test_coloring_partitions_edges(g):
    col = edge_coloring(g)
    seen = []
    for cls in col.colors:
        nodes = [x for e in cls for x in e]
        assert len(nodes) == len(set(nodes))
        seen += [tuple(sorted(e)) for e in cls]
    assert sorted(seen) == sorted(map(tuple, g.edges.tolist()))
    assert col.d <= g.max_degree + 1


@given(graphs(max_n=16))
def test_spectral_invariants(g):
    s = MatchingSchedule(g, "circuit")
    M = s.round_matrix()
    assert np.abs(M.sum(axis=1) - 1).max() <= 1e-12
    rep = spectral(g, round_matrix=M)
    assert np.all(np.abs(rep.eigenvalues) <= 1 + 1e-9)
    assert 0 <= rep.lambda_M <= 1 + 1e-9
    p = spectral(g, gamma=2.0)
    assert 0 <= p.lambda_P <= 1 + 1e-9
    if g.n <= 12:
        phi = conductance(g, 2.0)
        assert p.lambda2_P <= 1 - phi**2 / 2 + 1e-9


@given(graphs(), st.integers(0, 2**31), st.lists(st.integers(1, 60), min_size=1, max_size=8))
def test_random_matchings_valid_and_replayable(g, seed, rounds):
    a = MatchingSchedule(g, "random", seed=seed)
    b = MatchingSchedule(g, "random", seed=seed)
    b.take(7)
    for t in rounds:
        m = a.matching_at(t)
        assert m.valid_for(g)
        assert b.matching_at(t) == m


@given(runs(), st.integers(0, 25))
def test_interval_matrix_doubly_stochastic(run, T):
    g, sched, _, _ = run
    ms = sched.take(T)
    A = interval_matrix(ms, g.n).matrix
    assert np.abs(A.sum(axis=0) - 1).max() <= 1e-12
    assert np.abs(A.sum(axis=1) - 1).max() <= 1e-12
    assert np.allclose(A.T, interval_matrix(ms[::-1], g.n).matrix, atol=1e-12)
    assert (A >= 0).all()


@given(runs(), st.integers(-40, 40), st.sampled_from(["random", "deterministic"]))
def test_discrete_round_invariants(run, alpha, strategy):
    g, sched, seed, x0 = run
    lower = x0 - (np.arange(g.n) % 3)
    x, y, z = LoadState.discrete(x0), LoadState.discrete(x0 + alpha), LoadState.discrete(lower)
    total = x.total
    xn, _ = normalize(x)
    poly = polynomial_potential(xn.loads)
    for t in range(1, 31):
        m = sched.matching_at(t)
        prev = x.loads
        x, o, e = discrete_round(x, m, strategy, rng.stream(seed, t, "orientation"))
        if strategy == "deterministic":
            assert np.array_equal(o.phi == 1, prev[m.us] >= prev[m.vs])
        y, _, _ = discrete_round(y, m, phi=o.phi)
        z, _, _ = discrete_round(z, m, phi=o.phi)
        assert x.total == total
        assert x.loads.max() <= prev.max() and x.loads.min() >= prev.min()
        assert set(e.pair.tolist()) <= {-0.5, 0.0, 0.5}
        cont = continuous_round(LoadState.continuous(prev), m).loads
        assert np.array_equal(x.loads - cont, e.node)
        assert np.array_equal(y.loads, x.loads + alpha)
        assert (z.loads <= x.loads).all()
        xn, _ = normalize(x)
        new_poly = polynomial_potential(xn.loads)
        assert new_poly <= poly
        poly = new_poly


@given(runs())
def test_continuous_quadratic_nonincreasing(run):
    g, sched, _, x0 = run
    xi = LoadState.continuous(x0)
    q = quadratic_potential(xi.loads)
    for t in range(1, 21):
        xi = continuous_round(xi, sched.matching_at(t))
        new = quadratic_potential(xi.loads)
        assert new <= q + 1e-9 * max(1.0, q)
        q = new
    assert abs(xi.loads.sum() - x0.sum()) <= 1e-9 * g.n * max(1, np.abs(x0).max())


@given(runs())
def test_tokens_and_canonical_paths(run):
    g, sched, seed, x0 = run
    x0 = np.abs(x0) % 7
    x = LoadState.discrete(x0)
    tok = TokenState.from_loads(x0)
    trace = CanonicalPathTrace(0, (0,))
    for t in range(1, 16):
        m = sched.matching_at(t)
        before = x
        gen = rng.stream(seed, t, "orientation")
        x2, o, _ = discrete_round(x, m, "random", gen)
        x, tok = token_round(x, tok, m, urn_gen=rng.stream(seed, t, "urn"), phi=o.phi)
        assert np.array_equal(x.loads, x2.loads)
        assert np.array_equal(tok.loads(g.n), x.loads)
        trace = canonical_step(trace, before, m, o)
        a, b = trace.positions[-2], trace.positions[-1]
        assert a == b or (min(a, b), max(a, b)) in m.pairs


@given(graphs(max_n=12), st.sampled_from([2.0, "auto", 1.5]), st.integers(0, 2**31))
def test_diffusion_invariants(g, gamma, seed):
    gamma = 1 + 1 / g.max_degree if gamma == "auto" else gamma
    dm = DiffusionMatrix(g, gamma)
    P = dm.P
    assert np.allclose(P, P.T) and np.allclose(P.sum(axis=1), 1)
    assert (np.diag(P) >= 1 - 1 / gamma - 1e-12).all()
    gen = np.random.default_rng(seed)
    x = LoadState.discrete(gen.integers(0, 60, g.n))
    for t in range(1, 11):
        prev = x.loads
        x, e = edge_based_round(x, dm, rng.stream(seed, t, "edge_rounding"))
        assert x.total == prev.sum()
        assert (np.abs(e.pair) < 1).all()
        assert np.all(e.pair[e.flow == np.round(e.flow)] == 0)
        assert np.abs(x.loads - prev @ P - e.node).max() <= 1e-12
    if g.is_regular:
        y = LoadState.discrete(gen.integers(0, 60, g.n))
        for t in range(1, 11):
            prev = y.loads
            y = vertex_based_round(y, g, rng.stream(seed, t, "vertex_leftover"))
            assert y.total == prev.sum() and (y.loads >= 0).all()


@given(runs(max_n=12), st.integers(1, 40))
def test_divergence_bounds(run, T):
    g, sched, _, _ = run
    ms = sched.take(T)
    r = psi_p_matching(ms, g.n, check_telescoping=True)
    assert r.psi_p == 0 or 1 - 1e-9 <= r.psi_p <= math.sqrt(2 - 2 / g.n) + 1e-9
    assert r.telescoping_error <= 1e-12
    t1 = max(1, T // 2)
    prefix, bound = largetime_terms(ms, g.n, t1)
    assert (prefix <= bound + 1e-12).all()


@st.composite
def small_instances(draw):
    n = draw(st.integers(2, 4))
    edges = [(u, v) for u in range(n) for v in range(u + 1, n)]
    rounds = []
    for _ in range(draw(st.integers(1, 3))):
        picked, used = [], set()
        for e in draw(st.permutations(edges)):
            if draw(st.booleans()) and not (set(e) & used):
                picked.append(e)
                used.update(e)
        rounds.append(Matching(tuple(picked)))
    x0 = draw(st.lists(st.integers(0, 4), min_size=n, max_size=n).filter(lambda x: sum(x) <= 4))
    return x0, rounds


@given(small_instances())
def test_urn_equivalence_and_negative_correlation(inst):
    x0, ms = inst
    a = enumerate_protocol(x0, ms, "rounding_error")
    b = enumerate_protocol(x0, ms, "token_urn")
    assert a.total() == 1 and b.total() == 1
    assert a.tv(b) == 0
    sweep = negative_correlation_sweep(x0, ms)
    assert sweep["violations"] == 0 and sweep["singleton_mismatches"] == 0


@given(small_instances(), st.integers(-3, 3))
def test_mirror_coupling_exhaustive(inst, shift):
    x0, ms = inst
    assert check_mirror_coupling([v + shift for v in x0], ms)
