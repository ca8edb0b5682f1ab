import io

import numpy as np
import pytest
from scipy.stats import chisquare

from vacantlab import chains, walk
from vacantlab.rng import stream
from vacantlab.slt import ChainKernel

from conftest import random_kernel


def test_invariant_measure(small_kernels):
    for k in small_kernels:
        P = k.matrix()
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-10)
        assert 0.5 * np.abs(k.pi @ P - k.pi).sum() < 1e-8
        assert k.stationarity_error() < 1e-8


def test_product_form_matches_dense(small_kernels):
    Y, _ = small_kernels
    P = Y.matrix()
    m = stream(1).dirichlet(np.ones(P.shape[0]))
    np.testing.assert_allclose(Y.step_measure(m), m @ P, atol=1e-14)
    for x in (0, 17, P.shape[0] - 1):
        np.testing.assert_allclose(Y.rho(x) * Y.mu, P[x], atol=1e-14)
    dense = ChainKernel.from_matrix(P, mu=Y.mu, pi=Y.pi, tol=1e-8)
    np.testing.assert_allclose(Y.var_rho(), dense.var_rho(), atol=1e-10)


def test_shared_invariant_measure(small_kernels, small_data):
    Y, Z = small_kernels
    np.testing.assert_allclose(Y.pi, Z.pi)
    np.testing.assert_allclose(Y.pi, chains.invariant_pi(small_data))


def test_torus_entrance_against_simulation(small_domain, small_kernels):
    Y, _ = small_kernels
    dom = small_domain
    in_b = dom.box.mask.ravel()
    col = {int(y): j for j, y in enumerate(dom.dB)}
    rng = stream(2)
    for j in (0, 150):
        counts = np.zeros(dom.dB.size)
        n = 3000
        for _ in range(n):
            st = walk.WalkState(int(dom.dDelta[j]), 0, rng)
            hit, _ = walk.run_until_hit(st, in_b, dom.neighbors, 10**8)
            counts[col[int(hit)]] += 1
        p = Y.enter[j]
        se = np.sqrt(p * (1 - p) / n)
        assert (np.abs(counts / n - p) < 4 * se + 1e-3).all()


def test_interlacement_entrance(small_kernels):
    _, Z = small_kernels
    assert ((Z.escape > 0) & (Z.escape < 1)).all()
    np.testing.assert_allclose(Z.hit.sum(axis=1) + Z.escape, 1.0, atol=1e-10)
    np.testing.assert_allclose(Z.enter.sum(axis=1), 1.0, atol=1e-10)


def test_start_distribution(small_domain, small_data):
    # nu_Y: where the walk from a uniform start makes its first return to B after visiting Delta
    dom = small_domain
    nu = chains.nu_Y_entry(dom, small_data)
    assert nu.sum() == pytest.approx(1.0)
    in_b = dom.box.mask.ravel()
    in_d = dom.delta.mask.ravel()
    col = {int(y): j for j, y in enumerate(dom.dB)}
    rng = stream(3)
    n = 3000
    counts = np.zeros(dom.dB.size)
    for _ in range(n):
        st = walk.WalkState(int(rng.integers(dom.geom.volume)), 0, rng)
        walk.run_until_hit(st, in_d, dom.neighbors, 10**8)
        hit, _ = walk.run_until_hit(st, in_b, dom.neighbors, 10**8)
        counts[col[int(hit)]] += 1
    se = np.sqrt(nu * (1 - nu) / n)
    assert (np.abs(counts / n - nu) < 4 * se).all()


def test_tv_profile_matches_dense(small_kernels):
    Y, _ = small_kernels
    P = Y.matrix()
    prof = chains.tv_profile(Y, 3)
    Pn = P.copy()
    for n in range(1, 4):
        assert prof[n] == pytest.approx(0.5 * np.abs(Pn - Y.pi).sum(axis=1).max(), abs=1e-10)
        Pn = Pn @ P


def test_mixing_time_small_chain():
    # lazy walk on a 6-cycle, checked against the definition directly
    m = 6
    P = np.zeros((m, m))
    for i in range(m):
        P[i, i] = 0.5
        P[i, (i + 1) % m] = 0.25
        P[i, (i - 1) % m] = 0.25
    k = ChainKernel.from_matrix(P)
    n, Pn = 1, P.copy()
    while 0.5 * np.abs(Pn - 1 / m).sum(axis=1).max() > 0.25:
        Pn = Pn @ P
        n += 1
    assert chains.mixing_time(k) == n
    assert chains.mixing_time(k, method="coupling") >= n


def test_mixing_times_of_excursion_chains(small_kernels):
    for k in small_kernels:
        t = chains.mixing_time(k)
        assert 1 <= t <= chains.mixing_time(k, method="coupling")


def test_density_variance_random_kernel():
    k = ChainKernel.from_matrix(random_kernel(stream(4), 5))
    var, sup = chains.density_variance(k)
    P = k.matrix()
    for z in range(5):
        rho = P[:, z] / k.mu[z]
        assert var[z] == pytest.approx(k.pi @ rho**2 - (k.pi @ rho) ** 2)
    assert sup == pytest.approx(P.max())


def test_count_excursions_walk_is_reproducible(small_domain):
    a = chains.count_excursions_walk(small_domain, 8000, 5, seed=1)
    b = chains.count_excursions_walk(small_domain, 8000, 5, seed=1)
    assert np.array_equal(a, b)
    assert chains.count_excursions_walk(small_domain, 0, 3).sum() == 0


def test_count_excursions_walk_matches_decomposition(small_domain):
    # the fast counter agrees with decomposing an explicit path
    dom = small_domain
    rng = stream(5)
    t = 20_000
    path = walk.torus_trajectory(int(rng.integers(dom.geom.volume)), t, dom.neighbors, rng)
    _, recs = walk.excursion_decompose(path, dom.box.mask.ravel(), dom.delta.mask.ravel())
    assert len(recs) == sum(r.return_time < t for r in recs)


def test_export_kernel(small_kernels):
    Y, _ = small_kernels
    buf = io.StringIO()
    rows = chains.export_kernel(Y, buf, tol=1e-3)
    lines = buf.getvalue().split("\r\n")
    assert lines[0].startswith("# {") and lines[1] == "i,j,p"
    assert len(lines) == rows + 3
    i, j, p = lines[2].split(",")
    assert float(p) == pytest.approx(Y.matrix()[int(i), int(j)])


def test_transition_depends_on_exit_point_only(small_kernels):
    Y, Z = small_kernels
    n_exit = Y.space.n_exit
    for K in (Y, Z):
        P = K.matrix()
        for i2 in (0, 5, n_exit - 1):
            rows = P[i2::n_exit]
            assert (rows == rows[0]).all()


def test_invariant_pi_marginals(small_data):
    pi = chains.invariant_pi(small_data).reshape(small_data.space.n_entry, -1)
    assert pi.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(pi.sum(axis=1), small_data.ebar_delta, atol=1e-14)


def test_mixing_time_trivial_kernels():
    iid = ChainKernel.from_matrix(np.full((3, 3), 1 / 3))
    assert chains.mixing_time(iid) == 1
    flip = ChainKernel.from_matrix(np.full((2, 2), 0.5))
    assert chains.mixing_time(flip) == 1


def test_density_identities(small_kernels):
    for K in small_kernels:
        P = K.matrix()
        rho_mean = K.pi @ (P / K.mu[None, :])
        np.testing.assert_allclose(rho_mean, K.g, atol=1e-10)
    iid = ChainKernel.from_matrix(np.full((3, 3), 1 / 3))
    np.testing.assert_allclose(chains.density_variance(iid)[0], 0.0, atol=1e-15)


def test_interlacement_stream_follows_kernel(small_domain, small_kernels):
    from vacantlab.interlacements import sample_excursion_stream

    _, Z = small_kernels
    s = sample_excursion_stream(small_domain, 1500.0, seed=21)
    states = s.states()
    i1, i2 = Z.space.split(states)
    # next entry point given the previous exit point
    observed = np.bincount(i1[1:], minlength=Z.space.n_entry)
    expected = Z.enter[i2[:-1]].sum(axis=0)
    var = (Z.enter[i2[:-1]] * (1 - Z.enter[i2[:-1]])).sum(axis=0)
    assert (np.abs(observed - expected) < 4 * np.sqrt(var) + 1).all()
    # every trajectory starts from the normalised equilibrium measure of B
    first = np.array([s.entry_index[t.pairs[0][0]] for t in s.trajectories])
    assert chisquare(np.bincount(first, minlength=Z.space.n_entry), first.size * Z.ebar_B).pvalue > 1e-3


def test_excursions_per_trajectory_geometric_tail(small_domain, small_kernels):
    from vacantlab.interlacements import RIExcursionSampler

    _, Z = small_kernels
    p = Z.escape.min()
    sampler = RIExcursionSampler(small_domain)
    rng = stream(22)
    T = np.array([len(sampler.trajectory(rng).pairs) for _ in range(3000)])
    assert T.min() >= 1
    for k in (2, 3, 4):
        tail = (1 - p) ** (k - 1)
        freq = (T >= k).mean()
        assert freq <= tail + 4 * np.sqrt(tail * (1 - tail) / T.size)


def test_count_excursions_ri(small_domain):
    totals, per = chains.count_excursions_ri(small_domain, 0.0, 4)
    assert totals.sum() == 0 and per.size == 0
    totals, per = chains.count_excursions_ri(small_domain, 2.0, 20, seed=3)
    assert totals.sum() == per.sum() and (per >= 1).all()
