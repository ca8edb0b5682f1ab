"""Chernov-type tail bounds for additive functionals of finite Markov chains.

``gamma_dev`` is the deviation level of the bound.  It is unrelated to the
geometry exponent ``gamma`` used by :mod:`vacantlab.lattice`.

Bounds >= 1 are returned as computed (never clamped) and flagged ``vacuous``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import binomtest

from .errors import BoundInapplicable, DeltaOutOfRange, FOutOfRange, GammaOutOfRange, KNonpositive
from .rng import as_generator


@dataclass(frozen=True)
class Bound:
    value: float
    k: float
    floor_term: int
    exponent_rate: float  # gamma_dev^2 / (6 sigma2)

    @property
    def vacuous(self) -> bool:
        return self.value >= 1.0


def _check(gamma_dev: float, sigma2: float, pi_star: float, T: float) -> float:
    if sigma2 <= 0:
        raise BoundInapplicable("sigma2 must be positive")
    if not 0 < gamma_dev <= min(sigma2, 0.5):
        raise GammaOutOfRange(f"gamma_dev={gamma_dev} not in (0, min(sigma2, 1/2)] with sigma2={sigma2}")
    if not 0 < pi_star <= 1:
        raise ValueError("pi_star must lie in (0, 1]")
    if T <= 0:
        raise ValueError("mixing time must be positive")
    q = pi_star * gamma_dev**2 / (6 * sigma2)
    if q >= 1:
        raise KNonpositive(f"pi_star gamma^2 / (6 sigma2) = {q} >= 1")
    return q


def chernov_discrete(n: int, gamma_dev: float, sigma2: float, pi_star: float, T: float) -> Bound:
    """4 exp(-floor(n / (k T) - 1) gamma^2 / (6 sigma2)) with k = -log2(pi_star gamma^2 / (6 sigma2))."""
    q = _check(gamma_dev, sigma2, pi_star, T)
    k = -math.log2(q)
    rate = gamma_dev**2 / (6 * sigma2)
    fl = math.floor(n / (k * T) - 1)
    return Bound(4.0 * math.exp(-fl * rate), k, fl, rate)


def chernov_continuous(t: float, gamma_dev: float, sigma2: float, pi_star: float, T: float) -> Bound:
    """Same expression for a continuous-time chain run for time ``t``."""
    return chernov_discrete(t, gamma_dev, sigma2, pi_star, T)


@dataclass(frozen=True)
class FunctionalInput:
    """Parameters of the bound for a general observable ``h`` once centred and rescaled."""

    mean: float  # pi(h)
    sup: float  # ||h||_inf
    sigma2: float  # variance proxy for h
    gamma_dev: float  # deviation level for f = (h - pi(h)) / (2 ||h||_inf)
    sigma2_f: float


def functional_input(h, pi, delta: float, sigma2: float | None = None) -> FunctionalInput:
    h = np.asarray(h, dtype=float)
    pi = np.asarray(pi, dtype=float)
    mean = float(pi @ h)
    var = float(pi @ (h - mean) ** 2)
    sigma2 = var if sigma2 is None else float(sigma2)
    if sigma2 < var - 1e-12:
        raise ValueError(f"sigma2={sigma2} is below Var_pi(h)={var}")
    if sigma2 <= 1e-15:
        raise BoundInapplicable("h has zero variance under pi")
    sup = float(np.abs(h).max())
    if mean <= 0:
        raise DeltaOutOfRange("the relative deviation needs pi(h) > 0")
    limit = min(sigma2 / (2 * mean * sup), 1.0)
    if not 0 < delta <= limit * (1 + 1e-12):
        raise DeltaOutOfRange(f"delta={delta} not in (0, {limit:.6g}]")
    return FunctionalInput(mean, sup, sigma2, delta * mean / (2 * sup), sigma2 / (4 * sup**2))


def chernov_functional(h, delta: float, t: float, pi, T: float, sigma2: float | None = None) -> Bound:
    """Bound on P[int_0^t h(X_s) ds - t pi(h) >= delta t pi(h)].

    Reduces to :func:`chernov_continuous` for f = (h - pi(h)) / (2 ||h||_inf)
    with gamma_dev = delta pi(h) / (2 ||h||_inf); the resulting k equals
    -log2(delta^2 pi(h)^2 pi_star / (6 sigma2)).
    """
    pi = np.asarray(pi, dtype=float)
    fi = functional_input(h, pi, delta, sigma2)
    gamma_dev = min(fi.gamma_dev, fi.sigma2_f, 0.5)  # guard last-ulp rounding at the boundary
    return chernov_continuous(t, gamma_dev, fi.sigma2_f, float(pi.min()), T)


# ---------------------------------------------------------------- Monte Carlo


@dataclass(frozen=True)
class TailEstimate:
    frequency: float
    count: int
    replicas: int
    low: float
    high: float


def _transition_matrix(kernel) -> np.ndarray:
    P = kernel.matrix() if hasattr(kernel, "matrix") else np.asarray(kernel, dtype=float)
    return np.asarray(P, dtype=float)


def stationary(P: np.ndarray) -> np.ndarray:
    n = P.shape[0]
    A = np.vstack([P.T - np.eye(n), np.ones(n)])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    return np.linalg.lstsq(A, b, rcond=None)[0]


def center(f, pi) -> np.ndarray:
    """f - pi(f); refuses values outside [-1, 1] before or after centring."""
    f = np.asarray(f, dtype=float)
    if np.any(np.abs(f) > 1):
        raise FOutOfRange("f must take values in [-1, 1]")
    g = f - float(np.asarray(pi) @ f)
    if np.any(np.abs(g) > 1 + 1e-12):
        raise FOutOfRange("centred f leaves [-1, 1]")
    return np.clip(g, -1.0, 1.0)


def empirical_tail(kernel, f, n: int, gamma_dev: float, replicas: int, rng=None, start=None,
                   pi=None, confidence: float = 0.95) -> TailEstimate:
    """Frequency of {sum_{i<n} f(X_i) >= n gamma_dev} over ``replicas`` runs, with a Wilson interval.

    ``f`` is centred under the invariant law first.  The chain starts from
    ``start`` (a distribution), defaulting to the invariant law.
    """
    P = _transition_matrix(kernel)
    pi = stationary(P) if pi is None else np.asarray(pi, dtype=float)
    g = center(f, pi)
    rng = as_generator(rng)
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = 1.0
    init = np.cumsum(pi if start is None else np.asarray(start, dtype=float))
    init[-1] = 1.0
    x = np.searchsorted(init, rng.random(replicas), side="right")
    total = np.zeros(replicas)
    for _ in range(n):
        total += g[x]
        u = rng.random(replicas)
        x = (cum[x] <= u[:, None]).sum(axis=1)
    count = int(np.count_nonzero(total >= n * gamma_dev - 1e-9))
    ci = binomtest(count, replicas).proportion_ci(confidence, method="wilson")
    return TailEstimate(count / replicas, count, replicas, float(ci.low), float(ci.high))


def write_bound_table(rows, fh) -> None:
    """CSV of bound records (dicts or dataclasses); columns from the first row."""
    rows = [asdict(r) if not isinstance(r, dict) else r for r in rows]
    if not rows:
        return
    w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\r\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
