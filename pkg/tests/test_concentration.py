import io
import math

import numpy as np
import pytest

from vacantlab import concentration as conc
from vacantlab.errors import DeltaOutOfRange, FOutOfRange, GammaOutOfRange
from vacantlab.rng import stream


def test_discrete_bound_fixture():
    b = conc.chernov_discrete(1000, 0.1, 0.5, 0.1, 5)
    # k = -log2(0.1 * 0.01 / 3), floor(1000 / (5k) - 1) = 16
    assert b.k == pytest.approx(-math.log2(0.001 / 3))
    assert b.k == pytest.approx(11.5507, abs=1e-4)
    assert b.floor_term == 16
    assert b.value == pytest.approx(4 * math.exp(-16 * 0.01 / 3))
    assert b.value == pytest.approx(3.7923, abs=1e-4)
    assert b.vacuous


def test_bound_decreases_in_n():
    vals = [conc.chernov_discrete(n, 0.2, 0.3, 0.2, 2).value for n in (500, 2000, 8000)]
    assert vals[0] > vals[1] > vals[2]
    assert not conc.chernov_discrete(8000, 0.2, 0.3, 0.2, 2).vacuous


def test_gamma_range():
    with pytest.raises(GammaOutOfRange):
        conc.chernov_discrete(100, 0.6, 1.0, 0.1, 1)
    with pytest.raises(GammaOutOfRange):
        conc.chernov_discrete(100, 0.3, 0.2, 0.1, 1)


def test_k_is_positive_on_the_admissible_range():
    # gamma_dev <= min(sigma2, 1/2) keeps pi_star gamma^2 / (6 sigma2) <= 1/12
    b = conc.chernov_discrete(10, 0.5, 0.5, 1.0, 1)
    assert b.k == pytest.approx(math.log2(12))


def test_functional_matches_mapped_continuous():
    h = np.array([1.0, 2.0, 3.0])
    pi = np.array([0.2, 0.5, 0.3])
    fi = conc.functional_input(h, pi, 0.03)
    direct = conc.chernov_continuous(5000.0, fi.gamma_dev, fi.sigma2_f, 0.2, 3)
    assert conc.chernov_functional(h, 0.03, 5000.0, pi, 3).value == pytest.approx(direct.value)
    mean = pi @ h
    sigma2 = pi @ (h - mean) ** 2
    expect_k = -math.log2(0.03**2 * mean**2 * 0.2 / (6 * sigma2))
    assert direct.k == pytest.approx(expect_k)


def test_functional_scale_invariance():
    h = np.array([1.0, 2.0, 3.0])
    pi = np.array([0.2, 0.5, 0.3])
    a = conc.chernov_functional(h, 0.03, 3000.0, pi, 2)
    b = conc.chernov_functional(2 * h, 0.03, 3000.0, pi, 2)
    assert a.value == pytest.approx(b.value)


def test_functional_delta_limit():
    h = np.array([1.0, 2.0, 3.0])
    pi = np.array([0.2, 0.5, 0.3])
    with pytest.raises(DeltaOutOfRange):
        conc.functional_input(h, pi, 0.1)


def test_center_rejects_large_values():
    with pytest.raises(FOutOfRange):
        conc.center([0.0, 1.5], [0.5, 0.5])
    with pytest.raises(FOutOfRange):
        conc.center([-1.0, 1.0], [0.9, 0.1])
    np.testing.assert_allclose(conc.center([0.0, 1.0], [0.5, 0.5]), [-0.5, 0.5])


def test_stationary():
    P = np.array([[0.9, 0.1], [0.3, 0.7]])
    np.testing.assert_allclose(conc.stationary(P), [0.75, 0.25])


def test_empirical_tail_iid_matches_binomial():
    # i.i.d. fair coin: P[sum f >= n gamma] with f = +-1/2 is a binomial tail
    P = np.full((2, 2), 0.5)
    n, gamma, reps = 40, 0.1, 4000
    est = conc.empirical_tail(P, [-0.5, 0.5], n, gamma, reps, rng=stream(1))
    from scipy.stats import binom

    k = math.ceil((n * gamma + n / 2))  # number of heads needed
    p = binom.sf(k - 1, n, 0.5)
    assert abs(est.frequency - p) < 4 * math.sqrt(p * (1 - p) / reps)
    assert est.low <= est.frequency <= est.high


def test_empirical_tail_below_bound_on_random_chain():
    rng = stream(2)
    P = rng.dirichlet(np.ones(4), size=4)
    pi = conc.stationary(P)
    f = conc.center(np.array([1.0, -1.0, 0.5, -0.5]) * 0.5, pi)
    sigma2 = float(pi @ f**2)
    gamma = min(sigma2, 0.5)
    b = conc.chernov_discrete(4000, gamma, sigma2, float(pi.min()), 2)
    est = conc.empirical_tail(P, f, 4000, gamma, 300, rng=stream(3))
    assert est.frequency <= b.value


def test_bound_table_csv():
    buf = io.StringIO()
    conc.write_bound_table([conc.chernov_discrete(1000, 0.1, 0.5, 0.1, 5)], buf)
    lines = buf.getvalue().split("\r\n")
    assert lines[0] == "value,k,floor_term,exponent_rate"
    assert "np.float64" not in lines[1]


def test_continuous_equals_discrete():
    a = conc.chernov_continuous(1000.0, 0.1, 0.5, 0.1, 5)
    b = conc.chernov_discrete(1000, 0.1, 0.5, 0.1, 5)
    assert a == b


def test_short_horizon_is_vacuous():
    b = conc.chernov_continuous(50.0, 0.1, 0.5, 0.1, 5)  # t < k T
    assert b.floor_term <= -1 and b.value >= 4 and b.vacuous


def test_constant_functional_is_inapplicable():
    from vacantlab.errors import BoundInapplicable

    with pytest.raises(BoundInapplicable):
        conc.chernov_functional(np.ones(3), 0.01, 100.0, np.full(3, 1 / 3), 1)


def test_functional_three_state_fixture():
    # pi(h) = 2.1, Var = 0.49, ||h|| = 3: gamma_dev = 0.03 * 2.1 / 6, sigma2_f = 0.49 / 36
    h = np.array([1.0, 2.0, 3.0])
    pi = np.array([0.2, 0.5, 0.3])
    fi = conc.functional_input(h, pi, 0.03)
    assert fi.mean == pytest.approx(2.1) and fi.sigma2 == pytest.approx(0.49)
    assert fi.gamma_dev == pytest.approx(0.0105) and fi.sigma2_f == pytest.approx(0.49 / 36)
    b = conc.chernov_functional(h, 0.03, 5000.0, pi, 3)
    rate = 0.0105**2 / (6 * 0.49 / 36)
    k = -math.log2(0.2 * 0.0105**2 / (6 * 0.49 / 36))
    assert b.value == pytest.approx(4 * math.exp(-math.floor(5000 / (k * 3) - 1) * rate))


def test_zero_functional_never_exceeds():
    est = conc.empirical_tail(np.full((2, 2), 0.5), [0.0, 0.0], 100, 0.1, 200, rng=stream(4))
    assert est.count == 0


def test_balanced_coin_tail_at_n500():
    from scipy.stats import binom

    # sum of +-1 over 500 fair flips >= 100 means at least 300 heads
    p = binom.sf(299, 500, 0.5)
    est = conc.empirical_tail(np.full((2, 2), 0.5), [-1.0, 1.0], 500, 0.2, 2000, rng=stream(5))
    assert est.low <= p <= est.high
