"""Soft local times: coupling Markov chains through one Poisson point process.

A Poisson point process on (states) x [0, inf) with intensity mu x Lebesgue
is shared by several "sides".  Each side keeps its own soft local time G
and its own consumption pointers; at every step it raises G along the
density row rho(current state, .) until the lowest unconsumed point of some
fiber is reached, and that fiber becomes the next state.

Notation: ``mu`` is the base measure, ``g = pi / mu`` and
``rho(x, y) = p(x, y) / mu(y)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import (BoundInapplicable, DegenerateRow, EpsilonOutOfRange, InvariantMismatch,
                     NotEnoughSteps, TooLarge)
from .rng import stream

DENSE_LIMIT = 20_000


class ChainKernel:
    """A finite Markov chain together with the base measure used for coupling.

    Transitions are stored as density rows:
    ``rho(x, y) = table[row_of[x], col_of[y]]``.  Several states may share a
    row or a column, which is how product-structured kernels stay small.
    ``p(x, y) = rho(x, y) * mu(y)``.
    """

    def __init__(self, table: np.ndarray, row_of: np.ndarray, mu: np.ndarray,
                 nu: np.ndarray | None = None, pi: np.ndarray | None = None, tol: float = 1e-10,
                 col_of: np.ndarray | None = None):
        self.table = np.ascontiguousarray(table, dtype=float)
        self.row_of = np.ascontiguousarray(row_of, dtype=np.int64)
        self.mu = np.asarray(mu, dtype=float)
        n = self.mu.size
        self.col_of = np.arange(n, dtype=np.int64) if col_of is None else np.ascontiguousarray(col_of, dtype=np.int64)
        if self.col_of.size != n or self.row_of.size != n or self.col_of.max() >= self.table.shape[1]:
            raise ValueError("inconsistent kernel shapes")
        if (self.mu <= 0).any():
            raise ValueError("the base measure needs full support")
        if (self.table < 0).any():
            raise ValueError("negative transition density")
        sums = self.table @ np.bincount(self.col_of, weights=self.mu, minlength=self.table.shape[1])
        if np.abs(sums - 1).max() > tol:
            raise ValueError(f"rows do not sum to 1 (max error {np.abs(sums - 1).max():.3e})")
        self.pi = self._stationary() if pi is None else np.asarray(pi, dtype=float)
        err = np.abs(self.step_measure(self.pi) - self.pi).max()
        if err > tol:
            raise InvariantMismatch(f"pi P differs from pi by {err:.3e}")
        self.nu = self.pi.copy() if nu is None else np.asarray(nu, dtype=float)
        if abs(self.nu.sum() - 1) > tol or (self.nu < 0).any():
            raise ValueError("nu is not a probability vector")

    @classmethod
    def from_matrix(cls, p, mu=None, nu=None, pi=None, tol: float = 1e-10) -> "ChainKernel":
        p = np.asarray(p, dtype=float)
        mu = np.ones(p.shape[0]) if mu is None else np.asarray(mu, dtype=float)
        return cls(p / mu[None, :], np.arange(p.shape[0]), mu, nu, pi, tol)

    @property
    def n_states(self) -> int:
        return self.mu.size

    @property
    def g(self) -> np.ndarray:
        return self.pi / self.mu

    @property
    def pi_star(self) -> float:
        return float(self.pi.min())

    def rho(self, x: int) -> np.ndarray:
        return self.table[self.row_of[x]][self.col_of]

    def matrix(self) -> np.ndarray:
        if self.n_states > DENSE_LIMIT:
            raise TooLarge(f"{self.n_states} states is too many for a dense matrix")
        return self.table[self.row_of][:, self.col_of] * self.mu[None, :]

    def step_measure(self, m: np.ndarray) -> np.ndarray:
        """m P, using the shared rows."""
        w = np.bincount(self.row_of, weights=m, minlength=self.table.shape[0])
        return (w @ self.table)[self.col_of] * self.mu

    def _stationary(self) -> np.ndarray:
        P = self.matrix()
        n = P.shape[0]
        A = P.T - np.eye(n)
        A[-1] = 1.0
        b = np.zeros(n)
        b[-1] = 1.0
        pi = np.linalg.solve(A, b)
        return np.clip(pi, 0.0, None) / np.clip(pi, 0.0, None).sum()

    def var_rho(self) -> np.ndarray:
        """Var_pi rho_z for every z, using pi(rho_z) = g(z)."""
        w = np.bincount(self.row_of, weights=self.pi, minlength=self.table.shape[0])
        second = (w @ (self.table**2))[self.col_of]
        return np.clip(second - self.g**2, 0.0, None)

    def rho_sup(self) -> np.ndarray:
        """||rho_z||_inf over the starting state, for every z."""
        used = np.unique(self.row_of)
        return self.table[used].max(axis=0)[self.col_of]


def iid_kernel(pi, mu=None) -> ChainKernel:
    """The kernel with p(x, .) = pi."""
    pi = np.asarray(pi, dtype=float)
    mu = np.ones(pi.size) if mu is None else np.asarray(mu, dtype=float)
    return ChainKernel((pi / mu)[None, :], np.zeros(pi.size, dtype=np.int64), mu, pi=pi)


# ---------------------------------------------------------------- Poisson process


class FiberedPoissonProcess:
    """Poisson points on states x [0, inf), rate mu(z) per fiber, generated lazily.

    The first ``FIRST_CHUNK`` points of every fiber come from one batched
    draw on the stream keyed by ``seed``.  After that fiber z grows in chunks
    of geometrically increasing size, chunk c >= 1 drawn from the stream
    keyed by (seed, z, c), so the realisation does not depend on the order
    in which fibers are queried.
    """

    FIRST_CHUNK = 16

    def __init__(self, mu: np.ndarray, seed: int):
        self.mu = np.asarray(mu, dtype=float)
        self.seed = int(seed)
        n = self.mu.size
        gaps = stream(self.seed).standard_exponential((n, self.FIRST_CHUNK)) / self.mu[:, None]
        self.levels = np.cumsum(gaps, axis=1)
        self.counts = np.full(n, self.FIRST_CHUNK, dtype=np.int64)
        self.chunks = np.ones(n, dtype=np.int64)

    def _chunk_size(self, c: int) -> int:
        return self.FIRST_CHUNK << min(c, 12)

    def extend(self, z: int) -> None:
        c = int(self.chunks[z])
        size = self._chunk_size(c)
        gaps = stream(self.seed, z, c).standard_exponential(size) / self.mu[z]
        start = self.levels[z, self.counts[z] - 1] if self.counts[z] else 0.0
        new = start + np.cumsum(gaps)
        need = self.counts[z] + size
        if need > self.levels.shape[1]:
            grown = np.empty((self.levels.shape[0], max(need, 2 * self.levels.shape[1])))
            grown[:, :self.levels.shape[1]] = self.levels
            self.levels = grown
        self.levels[z, self.counts[z]:need] = new
        self.counts[z] = need
        self.chunks[z] = c + 1

    def points(self, z: int) -> np.ndarray:
        return self.levels[z, :self.counts[z]]


@njit(cache=True, nogil=True)
def _select(row, col, levels, counts, idx, G):
    """Return (z, t) for the next point, (-1, z) if fiber z needs points, (-2, 0) if row is zero."""
    best = np.inf
    bz = -1
    for z in range(col.size):
        r = row[col[z]]
        if r > 0.0:
            if idx[z] >= counts[z]:
                return -1, float(z)
            t = (levels[z, idx[z]] - G[z]) / r
            if t < best:
                best = t
                bz = z
    if bz < 0:
        return -2, 0.0
    return bz, best


@njit(cache=True, nogil=True)
def _apply(row, col, levels, counts, idx, G, bz, t):
    for z in range(col.size):
        r = row[col[z]]
        if r > 0.0:
            G[z] += t * r
            if z != bz and idx[z] < counts[z] and G[z] >= levels[z, idx[z]]:
                # rounding tie: keep the unconsumed point strictly above G
                G[z] = np.nextafter(levels[z, idx[z]], -np.inf)
    v = levels[bz, idx[bz]]
    G[bz] = v
    idx[bz] += 1
    return v


@njit(cache=True, nogil=True)
def _range_violations(levels, counts, idx, G, visited):
    bad = 0
    for z in range(G.size):
        covered = idx[z] > 0
        if covered != visited[z]:
            bad += 1
        if idx[z] > 0 and levels[z, idx[z] - 1] > G[z]:
            bad += 1
        if idx[z] < counts[z] and levels[z, idx[z]] <= G[z]:
            bad += 1
    return bad


@njit(cache=True, nogil=True)
def _run(table, row_of, col_of, first_row, ident, levels, counts, idx, G, prev, k, n_steps,
         out_z, out_xi, out_v, check, visited):
    """Advance until n_steps; returns (k, prev, status, fiber, violations)."""
    bad = 0
    while k < n_steps:
        if prev < 0:
            row = first_row
            col = ident
        else:
            row = table[row_of[prev]]
            col = col_of
        bz, t = _select(row, col, levels, counts, idx, G)
        if bz == -1:
            return k, prev, 1, int(t), bad
        if bz == -2:
            return k, prev, 2, -1, bad
        v = _apply(row, col, levels, counts, idx, G, bz, t)
        out_z[k] = bz
        out_xi[k] = t
        out_v[k] = v
        prev = bz
        k += 1
        if check:
            visited[bz] = True
            bad += _range_violations(levels, counts, idx, G, visited)
    return k, prev, 0, -1, bad


@dataclass
class SoftLocalTime:
    """One side of the coupling: its accumulator, pointers and produced path."""

    ppp: FiberedPoissonProcess
    G: np.ndarray
    idx: np.ndarray
    k: int = 0
    prev: int = -1
    states: list = field(default_factory=list)
    xis: list = field(default_factory=list)
    levels: list = field(default_factory=list)
    violations: int = 0

    @classmethod
    def fresh(cls, ppp: FiberedPoissonProcess) -> "SoftLocalTime":
        n = ppp.mu.size
        return cls(ppp, np.zeros(n), np.zeros(n, dtype=np.int64))

    def covered(self) -> np.ndarray:
        """States whose fiber has a point at or below G."""
        return self.idx > 0


def advance(slt: SoftLocalTime, row) -> tuple[float, int, float, SoftLocalTime]:
    """One step along the density row: returns (xi, next state, level, slt)."""
    row = np.ascontiguousarray(row, dtype=float)
    if not (row > 0).any():
        raise DegenerateRow("density row is identically zero")
    ppp = slt.ppp
    ident = np.arange(row.size, dtype=np.int64)
    while True:
        bz, t = _select(row, ident, ppp.levels, ppp.counts, slt.idx, slt.G)
        if bz == -1:
            ppp.extend(int(t))
            continue
        break
    v = _apply(row, ident, ppp.levels, ppp.counts, slt.idx, slt.G, bz, t)
    slt.states.append(int(bz))
    slt.xis.append(float(t))
    slt.levels.append(float(v))
    slt.k += 1
    slt.prev = int(bz)
    return float(t), int(bz), float(v), slt


def run_side(slt: SoftLocalTime, kernel: ChainKernel, n_steps: int, first_row=None,
             check: bool = False) -> SoftLocalTime:
    """Extend ``slt`` to ``n_steps`` states driven by ``kernel`` (batch form of advance)."""
    ppp = slt.ppp
    if first_row is None:
        first_row = kernel.nu / kernel.mu
    first_row = np.ascontiguousarray(first_row, dtype=float)
    total = n_steps - slt.k
    if total <= 0:
        return slt
    out_z = np.empty(n_steps, dtype=np.int64)
    out_xi = np.empty(n_steps)
    out_v = np.empty(n_steps)
    visited = np.zeros(kernel.n_states, dtype=np.bool_)
    if check:
        visited[np.asarray(slt.states, dtype=np.int64)] = True
    ident = np.arange(kernel.n_states, dtype=np.int64)
    k0 = slt.k
    k, prev = slt.k, slt.prev
    while True:
        k, prev, status, fib, bad = _run(kernel.table, kernel.row_of, kernel.col_of, first_row, ident,
                                         ppp.levels, ppp.counts,
                                         slt.idx, slt.G, prev, k, n_steps, out_z, out_xi, out_v,
                                         check, visited)
        slt.violations += bad
        if status == 1:
            ppp.extend(fib)
            continue
        if status == 2:
            raise DegenerateRow(f"density row of state {prev} is identically zero")
        break
    slt.states.extend(out_z[k0:k].tolist())
    slt.xis.extend(out_xi[k0:k].tolist())
    slt.levels.extend(out_v[k0:k].tolist())
    slt.k, slt.prev = k, prev
    return slt


# ---------------------------------------------------------------- couplings


@dataclass
class CouplingResult:
    first: np.ndarray
    second: np.ndarray
    good: bool
    n: int
    epsilon: float
    violations: int = 0
    sides: tuple = ()


def good_event(lead: np.ndarray, follow: np.ndarray, n: int, epsilon: float) -> bool:
    """{lead_i, i <= n(1-eps)} within {follow_i, i <= n} within {lead_i, i <= n(1+eps)}."""
    lo = int(math.floor(n * (1 - epsilon)))
    hi = int(math.floor(n * (1 + epsilon)))
    inner = set(lead[:lo + 1].tolist())
    mid = set(follow[:n + 1].tolist())
    outer = set(lead[:hi + 1].tolist())
    return inner <= mid <= outer


def _check_epsilon(epsilon: float) -> None:
    if not 0.0 <= epsilon <= 1.0:
        raise EpsilonOutOfRange(f"epsilon={epsilon} outside [0, 1]")


def epsilon_max(*kernels: ChainKernel) -> float:
    """Largest epsilon allowed by the variance condition, over all kernels."""
    m = 0.5
    for k in kernels:
        var = k.var_rho()
        m = min(m, float((var / (2 * k.rho_sup() * k.g)).min()))
    return m


def couple_iid(kernel: ChainKernel, n: int, epsilon: float, seed: int = 0,
               check: bool = False, ppp: FiberedPoissonProcess | None = None) -> CouplingResult:
    """Couple the chain (Z_0..Z_n) with i.i.d. pi samples (U_0..U_{n(1+eps)}).

    ``first`` holds U and ``second`` holds Z.
    """
    _check_epsilon(epsilon)
    ppp = ppp or FiberedPoissonProcess(kernel.mu, seed)
    chain = run_side(SoftLocalTime.fresh(ppp), kernel, n + 1, check=check)
    iid = iid_kernel(kernel.pi, kernel.mu)
    u_len = int(math.floor(n * (1 + epsilon))) + 1
    side = run_side(SoftLocalTime.fresh(ppp), iid, u_len, first_row=kernel.g, check=check)
    U = np.asarray(side.states)
    Z = np.asarray(chain.states)
    return CouplingResult(U, Z, good_event(U, Z, n, epsilon), n, epsilon,
                          chain.violations + side.violations, (side, chain))


def couple_chains(kernel1: ChainKernel, kernel2: ChainKernel, n: int, epsilon: float, seed: int = 0,
                  check: bool = False, ppp: FiberedPoissonProcess | None = None) -> CouplingResult:
    """Couple two chains with the same pi and mu; first = Z^1 up to n(1+eps), second = Z^2 up to n."""
    _check_epsilon(epsilon)
    if np.abs(kernel1.pi - kernel2.pi).sum() / 2 > 1e-8:
        raise InvariantMismatch("the kernels do not share their invariant measure")
    if not np.allclose(kernel1.mu, kernel2.mu, rtol=1e-12, atol=0):
        raise InvariantMismatch("the kernels do not share their base measure")
    ppp = ppp or FiberedPoissonProcess(kernel1.mu, seed)
    hi = int(math.floor(n * (1 + epsilon))) + 1
    s1 = run_side(SoftLocalTime.fresh(ppp), kernel1, hi, check=check)
    s2 = run_side(SoftLocalTime.fresh(ppp), kernel2, n + 1, check=check)
    Z1 = np.asarray(s1.states)
    Z2 = np.asarray(s2.states)
    return CouplingResult(Z1, Z2, good_event(Z1, Z2, n, epsilon), n, epsilon,
                          s1.violations + s2.violations, (s1, s2))


# ---------------------------------------------------------------- bounds


def k_of_epsilon(kernels, epsilon: float) -> float:
    """k(eps) = -min over kernels and z of log2(pi_* eps^2 g(z)^2 / (6 Var_pi rho_z))."""
    if epsilon <= 0:
        raise EpsilonOutOfRange("epsilon must be positive")
    kernels = kernels if isinstance(kernels, (list, tuple)) else [kernels]
    best = math.inf
    for k in kernels:
        var = k.var_rho()
        pos = var > 0
        if not pos.any():
            continue
        arg = k.pi_star * epsilon**2 * k.g[pos] ** 2 / (6 * var[pos])
        best = min(best, float(np.log2(arg).min()))
    if best == math.inf:
        raise BoundInapplicable("all densities rho_z are constant, k(eps) is infinite")
    return -best


def failure_bound(kernels, n: int, epsilon: float, T, c: float = 1.0, C: float = 1.0,
                  nus=None, check_steps: bool = True) -> float:
    """Right-hand side of the coupling failure estimate with constants c, C.

    ``T`` is the mixing time (one per kernel).  For two kernels the sum runs
    over both.  Terms with nu(z) = 0 contribute nothing to the start summand.
    """
    kernels = list(kernels) if isinstance(kernels, (list, tuple)) else [kernels]
    Ts = list(T) if isinstance(T, (list, tuple)) else [T] * len(kernels)
    eps_max = epsilon_max(*kernels)
    if not 0 < epsilon <= eps_max:
        raise EpsilonOutOfRange(f"epsilon={epsilon} outside (0, {eps_max:.6g}]")
    k = k_of_epsilon(kernels, epsilon)
    if check_steps and n < 2 * k * max(Ts):
        raise NotEnoughSteps(f"n={n} < 2 k(eps) T = {2 * k * max(Ts):.1f}")
    nus = nus or [kern.nu for kern in kernels]
    total = 0.0
    for kern, Ti, nu in zip(kernels, Ts, nus):
        pi, g, var = kern.pi, kern.g, kern.var_rho()
        first = np.full(pi.size, math.exp(-c * n * epsilon**2))
        with np.errstate(divide="ignore"):
            second = np.where(nu > 0, np.exp(-c * n * epsilon * pi / np.where(nu > 0, nu, 1.0)), 0.0)
            third = np.where(var > 0, np.exp(-c * epsilon**2 * g**2 / np.where(var > 0, var, 1.0)
                                             * n / (k * Ti)), 0.0)
        total += float((first + second + third).sum())
    return C * total


def dump_debug_csv(slt: SoftLocalTime, fh) -> None:
    """Write (state, level, step) for every consumed point."""
    w = csv.writer(fh, lineterminator="\r\n")
    w.writerow(["state", "level", "step"])
    for k, (z, v) in enumerate(zip(slt.states, slt.levels)):
        w.writerow([z, repr(float(v)), k])
