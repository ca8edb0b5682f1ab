import io

import numpy as np
import pytest

from vacantlab import walk
from vacantlab.lattice import neighbor_table
from vacantlab.rng import stream


def test_torus_trajectory_steps_are_nearest_neighbour():
    nbrs = neighbor_table(3, 7)
    path = walk.torus_trajectory(0, 500, nbrs, stream(1))
    assert path.size == 501
    assert all(path[i + 1] in nbrs[path[i]] for i in range(500))


def test_torus_trajectory_is_reproducible():
    nbrs = neighbor_table(3, 7)
    a = walk.torus_trajectory(3, 1000, nbrs, stream(5))
    b = walk.torus_trajectory(3, 1000, nbrs, stream(5))
    assert np.array_equal(a, b)


def test_run_until_hit_stops_on_target():
    nbrs = neighbor_table(3, 6)
    target = np.zeros(216, dtype=bool)
    target[100] = True
    state = walk.WalkState(0, 0, stream(2))
    hit, elapsed = walk.run_until_hit(state, target, nbrs, 10**7)
    assert hit and state.position == 100 and elapsed > 0


def test_excursion_decomposition_alternates(small_domain):
    dom = small_domain
    path = walk.torus_trajectory(0, 40_000, dom.neighbors, stream(3))
    in_b = dom.box.mask.ravel()
    in_d = dom.delta.mask.ravel()
    d0, recs = walk.excursion_decompose(path, in_b, in_d)
    assert recs and in_d[path[d0]]
    for r in recs:
        assert in_b[path[r.return_time]] and r.return_time > d0
        if r.finished:
            dep = int(r.departure_time)
            assert in_d[path[dep]] and dep > r.return_time
            assert not in_d[path[r.return_time:dep]].any()
    for a, b in zip(recs, recs[1:]):
        assert a.departure_time < b.return_time


def test_doob_path_ends_at_target(small_domain, small_data):
    dom = small_domain
    table = small_data.region.harmonic_table()
    in_d = dom.delta.mask.ravel()
    rng = stream(4)
    for j in (0, 10, 200):
        path = walk.doob_path(int(dom.dB[0]), table[j], in_d, dom.neighbors, rng)
        assert path[-1] == dom.dDelta[j]
        assert not in_d[path[:-1]].any()


def test_doob_path_exit_law_matches_unconditioned(small_domain, small_data):
    # averaging the conditioned law over the exit distribution recovers the plain walk:
    # the mean body length must agree with the unconditioned mean exit time
    dom = small_domain
    table = small_data.region.harmonic_table()
    M = small_data.exit_dist[0]
    in_d = dom.delta.mask.ravel()
    rng = stream(6)
    x = int(dom.dB[0])
    lens_cond = []
    for _ in range(400):
        j = rng.choice(M.size, p=M)
        lens_cond.append(len(walk.doob_path(x, table[j], in_d, dom.neighbors, rng)) - 1)
    lens_free = []
    for _ in range(400):
        st = walk.WalkState(x, 0, rng)
        _, t = walk.run_until_hit(st, in_d, dom.neighbors, 10**7)
        lens_free.append(t)
    a, b = np.mean(lens_cond), np.mean(lens_free)
    se = np.hypot(np.std(lens_cond), np.std(lens_free)) / np.sqrt(400)
    assert abs(a - b) < 4 * se


def test_walk_on_zd_leaves_kill_ball():
    # only the points strictly inside the ball are recorded
    tr = walk.walk_on_zd(np.zeros(3, dtype=np.int64), 6.0, stream(7))
    assert ((tr.points**2).sum(axis=1) < 36).all()
    last = tr.points[-1]
    assert (last**2).sum() >= 25


def test_trajectory_dump_roundtrip():
    pts = np.array([[0, 1, 2], [3, 4, 5], [-1, 0, 7]], dtype=np.int64)
    buf = io.BytesIO()
    walk.dump_trajectory(pts, buf)
    buf.seek(0)
    assert np.array_equal(walk.load_trajectory(buf, 3), pts)


def test_run_until_hit_already_in_target():
    nbrs = neighbor_table(3, 5)
    target = np.zeros(125, dtype=bool)
    target[7] = True
    st = walk.WalkState(7, 0, stream(0))
    assert walk.run_until_hit(st, target, nbrs, 100) == (7, 0)
    st = walk.WalkState(3, 0, stream(0))
    assert walk.run_until_hit(st, np.ones(125, dtype=bool), nbrs, 100) == (3, 0)


def test_mean_hitting_time_against_linear_solve():
    from vacantlab.potential import expected_hitting_time

    N = 20
    nbrs = neighbor_table(3, N)
    target = np.zeros(N**3, dtype=bool)
    target[0] = True
    exact = expected_hitting_time(nbrs, target).mean()
    rng = stream(8)
    times = []
    for _ in range(500):
        st = walk.WalkState(int(rng.integers(N**3)), 0, rng)
        times.append(walk.run_until_hit(st, target, nbrs, 10**9)[1])
    times = np.array(times)
    assert abs(times.mean() - exact) < 4 * times.std() / np.sqrt(times.size)
    # mean hitting time of a point is about N^d times the Green constant
    assert exact / N**3 == pytest.approx(1.516, rel=0.1)


def test_excursion_decompose_hand_examples():
    B, D = {"a"}, {"c"}
    d0, recs = walk.excursion_decompose(list("cbabca"), B, D)
    assert d0 == 0
    assert [(r.return_time, r.departure_time) for r in recs] == [(2, 4), (5, float("inf"))]
    d0, recs = walk.excursion_decompose(list("ccc"), B, D)
    assert d0 == 0 and recs == []
    d0, recs = walk.excursion_decompose(list("acac"), B, D)
    assert d0 == 1
    assert [(r.return_time, r.departure_time) for r in recs] == [(2, 3)]


def test_walk_on_zd_start_outside_ball():
    tr = walk.walk_on_zd(np.array([6, 0, 0]), 6.0, stream(9))
    assert tr.points.shape == (0, 3) and tr.escaped
    with pytest.raises(ValueError):
        walk.walk_on_zd(np.zeros(3, dtype=np.int64), float("inf"))


def test_walk_on_zd_return_probability():
    # P_(4,0,0)[reach |x| <= 2 before |x| >= 8], by a Dirichlet solve
    from vacantlab.potential import ball_region, exact_harmonic_solve

    coords, nbrs, inside = ball_region(np.zeros(3, dtype=np.int64), 8.0)
    sq = (coords**2).sum(axis=1)
    small = sq <= 4
    v = exact_harmonic_solve(inside & ~small, nbrs, small.astype(float))
    start = np.array([4, 0, 0])
    p = v[np.flatnonzero((coords == start).all(axis=1))[0]]
    rng = stream(10)
    n = 3000
    hits = sum(((walk.walk_on_zd(start, 8.0, rng).points ** 2).sum(axis=1) <= 4).any() for _ in range(n))
    assert abs(hits / n - p) < 4 * np.sqrt(p * (1 - p) / n)
