import numpy as np
import pytest

from tokenbal import rng
from tokenbal.graph import build_family
from tokenbal.matching_process import (
    CanonicalPathTrace,
    InvariantError,
    LoadState,
    OrientationSample,
    TokenState,
    canonical_path_batch,
    canonical_step,
    continuous_round,
    deviation_from_errors,
    deviation_series,
    discrete_round,
    discrete_rounds_batch,
    mirror_coupling_run,
    normalize,
    run_matching,
    token_round,
    token_walk_batch,
)
from tokenbal.schedule import Matching, MatchingSchedule, interval_matrix

K2 = Matching(((0, 1),))
EMPTY = Matching(())


def test_continuous_round_examples():
    assert continuous_round(LoadState.continuous([5.0, 2.0]), K2).loads.tolist() == [3.5, 3.5]
    assert continuous_round(LoadState.continuous([5.0, 2.0]), EMPTY).loads.tolist() == [5.0, 2.0]


def test_hypercube_full_circuit_averages_exactly():
    g = build_family("hypercube", 3)
    s = MatchingSchedule(g, "circuit")
    xi = LoadState.continuous(np.arange(8) ** 2)
    for t in range(1, 4):
        xi = continuous_round(xi, s.matching_at(t))
    assert np.allclose(xi.loads, np.mean(np.arange(8) ** 2), atol=1e-12)


def test_discrete_round_odd_sum():
    s, o, e = discrete_round(LoadState.discrete([5, 2]), K2, phi=[1])
    assert s.loads.tolist() == [4, 3]
    assert e.pair.tolist() == [0.5]
    s, _, e = discrete_round(LoadState.discrete([5, 2]), K2, phi=[-1])
    assert s.loads.tolist() == [3, 4] and e.pair.tolist() == [-0.5]


def test_discrete_round_even_sum():
    for phi in (1, -1):
        s, _, e = discrete_round(LoadState.discrete([4, 2]), K2, phi=[phi])
        assert s.loads.tolist() == [3, 3] and e.pair.tolist() == [0.0]


def test_deterministic_orientation():
    s, o, _ = discrete_round(LoadState.discrete([3, 1]), K2, "deterministic")
    assert o.phi.tolist() == [1] and s.loads.tolist() == [2, 2]
    _, o, _ = discrete_round(LoadState.discrete([2, 5]), K2, "deterministic")
    assert o.phi.tolist() == [-1]


def test_error_identity_exact():
    g = build_family("cycle", 7)
    x = LoadState.discrete([9, 0, 4, 4, 1, 13, 2])
    ms = MatchingSchedule(g, "random", seed=3).take(20)
    for t, m in enumerate(ms, 1):
        new, _, e = discrete_round(x, m, "random", rng.stream(0, t, "orientation"))
        cont = continuous_round(LoadState.continuous(x.loads), m).loads
        assert np.array_equal(new.loads - cont, e.node)
        x = new


def test_orientation_antisymmetric():
    o = OrientationSample(np.array([0, 2]), np.array([1, 3]), np.array([1, -1]))
    assert o.of(0, 1) == 1 and o.of(1, 0) == -1
    assert o.of(3, 2) == 1
    with pytest.raises(KeyError):
        o.of(0, 2)


def test_token_round_single_token():
    hits = 0
    for k in range(400):
        gen = np.random.default_rng(k)
        s, tok = token_round(LoadState.discrete([1, 0]), TokenState.from_loads([1, 0]), K2, gen)
        assert np.array_equal(tok.loads(2), s.loads)
        hits += tok.locations[0] == 0
    assert 160 < hits < 240


def test_token_round_two_tokens_split_evenly():
    at_u = np.zeros(2)
    for k in range(400):
        s, tok = token_round(LoadState.discrete([2, 0]), TokenState.from_loads([2, 0]), K2, np.random.default_rng(k))
        assert s.loads.tolist() == [1, 1]
        assert sorted(tok.locations.tolist()) == [0, 1]
        at_u += tok.locations == 0
    assert np.all(np.abs(at_u / 400 - 0.5) < 0.1)


def test_token_round_unmatched_stationary():
    m = Matching(((0, 1),))
    s, tok = token_round(
        LoadState.discrete([1, 2, 3]), TokenState.from_loads([1, 2, 3]), m, np.random.default_rng(0)
    )
    assert np.array_equal(tok.locations[3:], [2, 2, 2])


def test_token_round_inconsistent_state():
    with pytest.raises(InvariantError):
        token_round(LoadState.discrete([1, 0]), TokenState.from_loads([0, 1]), K2, np.random.default_rng(0))


@pytest.mark.parametrize(
    "xa,xb,phi,expect",
    [(5, 2, 1, 0), (5, 2, -1, 1), (1, 2, 1, 1), (1, 2, -1, 0)],
)
def test_canonical_step_cases(xa, xb, phi, expect):
    state = LoadState.discrete([xa, xb])
    orient = OrientationSample(np.array([0]), np.array([1]), np.array([phi]))
    tr = canonical_step(CanonicalPathTrace(0, (0,)), state, K2, orient)
    assert tr.current == expect


def test_canonical_step_unmatched():
    state = LoadState.discrete([1, 2, 3])
    orient = OrientationSample(np.array([0]), np.array([1]), np.array([1]))
    assert canonical_step(CanonicalPathTrace(2, (2,)), state, K2, orient).current == 2


def test_normalize_examples():
    s, off = normalize(LoadState.discrete([12, 10, 11]))
    assert s.loads.tolist() == [1, -1, 0] and off == 11
    assert normalize(LoadState.discrete([0, 0]))[1] == 0
    s, off = normalize(LoadState.discrete([7, 7, 7, 7]))
    assert s.loads.tolist() == [0, 0, 0, 0] and off == 7


def test_mirror_coupling_examples():
    xs, ys = mirror_coupling_run([3, 1], MatchingSchedule(build_family("complete", 2), "circuit"), 0, 5)
    assert np.array_equal(ys, 4 - xs)
    xs, ys = mirror_coupling_run([2, 2, 2], MatchingSchedule(build_family("path", 3), "circuit"), 1, 10)
    assert (xs == 2).all() and (ys == 2).all()
    for seed in range(5):
        xs, ys = mirror_coupling_run([3, 1, 2], MatchingSchedule(build_family("path", 3), "circuit"), seed, 50)
        assert np.array_equal(ys, 4 - xs)


def test_deviation_constant_and_forced():
    g = build_family("torus", 2, 3)
    assert deviation_series([5] * 9, MatchingSchedule(g, "random", seed=1), "random", 0, 30).max() == 0
    series = deviation_series([1, 0], MatchingSchedule(build_family("complete", 2), "circuit"), "random", 0, 1)
    assert series.tolist() == [0.5]


def test_deviation_matches_error_sum():
    g = build_family("hypercube", 4)
    x0 = rng.stream(3, 0, "initial").integers(0, 50, g.n)
    series, log = deviation_series(x0, MatchingSchedule(g, "random", seed=2), "random", 9, 60, return_log=True)
    explicit = deviation_from_errors(log["errors"], log["matchings"], g.n)
    assert np.abs(explicit - (log["x"] - log["xi"])).max() <= 1e-9
    assert np.abs(explicit).max() == pytest.approx(series[-1])


def test_batch_matches_sequential():
    g = build_family("cycle", 6)
    ms = MatchingSchedule(g, "random", seed=5).take(15)
    x0 = np.array([[7, 0, 3, 1, 0, 2], [0, 0, 9, 0, 0, 0]])
    X, phis = discrete_rounds_batch(x0, ms, np.random.default_rng(0))
    for r in range(2):
        x = LoadState.discrete(x0[r])
        for m, phi in zip(ms, phis):
            x, _, _ = discrete_round(x, m, phi=phi[r])
        assert np.array_equal(x.loads, X[r])


def test_token_law_matches_interval_matrix():
    g = build_family("path", 3)
    s = MatchingSchedule(g, "circuit")
    ms = s.take(3)
    x0 = [3, 1, 2]
    R = 100000
    loc = token_walk_batch(x0, ms, R, np.random.default_rng(1))
    M = interval_matrix(ms, 3).matrix
    start = np.repeat(np.arange(3), x0)
    for i, u in enumerate(start):
        for v in range(3):
            p = M[u, v]
            se = np.sqrt(max(p * (1 - p), 1e-12) / R)
            assert abs((loc[:, i] == v).mean() - p) <= 3 * se + 1e-12


def test_canonical_path_law_matches_interval_matrix():
    g = build_family("cycle", 5)
    ms = MatchingSchedule(g, "random", seed=4).take(6)
    x0 = [4, 0, 1, 3, 2]
    R = 100000
    pos = canonical_path_batch(x0, ms, 0, R, np.random.default_rng(2))
    M = interval_matrix(ms, 5).matrix
    for v in range(5):
        p = M[0, v]
        se = np.sqrt(max(p * (1 - p), 1e-12) / R)
        assert abs((pos == v).mean() - p) <= 3 * se + 1e-12


def test_run_matching_invariants_and_tokens():
    g = build_family("random_regular", 16, 3, seed=1)
    x0 = rng.stream(1, 0, "initial").integers(0, 20, g.n)
    tr = run_matching(x0, MatchingSchedule(g, "random", seed=1), 1, 40, tokens=True, log_matchings=True)
    assert tr.all_checks_pass
    assert set(tr.checks) >= {"conservation", "max_nonincreasing", "min_nondecreasing", "error_identity",
                              "token_consistency"}
    assert len(tr.records) == 41
    assert tr.to_jsonl().count("\n") == 41
    # the token run and the plain run share the orientation stream
    plain = run_matching(x0, MatchingSchedule(g, "random", seed=1), 1, 40)
    assert np.array_equal(plain.final, tr.final)
