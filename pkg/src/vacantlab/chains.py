"""Excursion chains on the pairs (entry point in dB, exit point in dDelta).

A state is x = (x1, x2) with x1 on the inner boundary of the box and x2 on
the inner boundary of Delta; its flat index is ``i1 * n_exit + i2``.

Both chains have the product form

    p(x, y) = enter(x2, y1) * exit(y1, y2)

where ``exit(y1, .)`` is the exit distribution from the box region into
Delta and ``enter(x2, .)`` is the entrance distribution into the box: from
the torus walk for Y, and for Z from the Z^d walk with the escape mass
redistributed according to the normalised equilibrium measure.  With the
base measure mu(x) = exit(x1, x2), the density rho(x, y) = enter(x2, y1)
depends on (x2, y1) only, which keeps every computation at the size of
enter.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import potential as pot
from . import walk as _walk
from .errors import InvariantMismatch, NotConverged, TooLarge
from .lattice import Domain
from .rng import stream
from .slt import DENSE_LIMIT, ChainKernel


@dataclass(frozen=True)
class ExcursionSpace:
    entry: np.ndarray  # flat torus indices of dB
    exit: np.ndarray  # flat torus indices of dDelta

    @property
    def n_entry(self) -> int:
        return self.entry.size

    @property
    def n_exit(self) -> int:
        return self.exit.size

    @property
    def size(self) -> int:
        return self.n_entry * self.n_exit

    def index(self, i1, i2):
        return np.asarray(i1) * self.n_exit + np.asarray(i2)

    def split(self, s):
        s = np.asarray(s)
        return s // self.n_exit, s % self.n_exit

    def sites(self, s):
        i1, i2 = self.split(s)
        return self.entry[i1], self.exit[i2]


class ExcursionKernel(ChainKernel):
    """Product-form kernel p(x, y) = enter[x2, y1] * exit_dist[y1, y2]."""

    def __init__(self, space: ExcursionSpace, enter: np.ndarray, exit_dist: np.ndarray,
                 ebar_delta: np.ndarray, nu: np.ndarray | None = None, lattice: str = "torus",
                 tol: float = 1e-8):
        self.space = space
        self.enter = np.asarray(enter, dtype=float)
        self.exit_dist = np.asarray(exit_dist, dtype=float)
        self.ebar_delta = np.asarray(ebar_delta, dtype=float)
        self.lattice = lattice
        if np.abs(self.enter.sum(axis=1) - 1).max() > tol:
            raise ValueError("entrance rows do not sum to 1")
        if np.abs(self.exit_dist.sum(axis=1) - 1).max() > tol:
            raise ValueError("exit rows do not sum to 1")
        self.mu = self.exit_dist.ravel().copy()
        if (self.mu <= 0).any():
            raise ValueError("exit distribution has zero entries; the base measure needs full support")
        self.pi = (self.ebar_delta[:, None] * self.exit_dist).ravel()
        err = self.stationarity_error()
        if err > tol:
            raise InvariantMismatch(f"pi P differs from pi by {err:.3e} in total variation")
        self.nu = self.pi.copy() if nu is None else np.asarray(nu, dtype=float)
        # density rows are indexed by x2 and columns by y1
        self.table = np.ascontiguousarray(self.enter)
        self.row_of = np.tile(np.arange(space.n_exit, dtype=np.int64), space.n_entry)
        self.col_of = np.repeat(np.arange(space.n_entry, dtype=np.int64), space.n_exit)

    @property
    def g(self) -> np.ndarray:
        return np.repeat(self.ebar_delta, self.space.n_exit)

    def rho(self, x: int) -> np.ndarray:
        return np.repeat(self.enter[int(x) % self.space.n_exit], self.space.n_exit)

    def matrix(self) -> np.ndarray:
        if self.space.size > DENSE_LIMIT:
            raise TooLarge(f"{self.space.size} states is too many for a dense matrix")
        per_x2 = (self.enter[:, :, None] * self.exit_dist[None, :, :]).reshape(self.space.n_exit, -1)
        return per_x2[self.row_of]

    def exit_marginal(self, m: np.ndarray) -> np.ndarray:
        return np.asarray(m).reshape(self.space.n_entry, self.space.n_exit).sum(axis=0)

    def step_measure(self, m: np.ndarray) -> np.ndarray:
        q = self.exit_marginal(m) @ self.enter
        return (q[:, None] * self.exit_dist).ravel()

    def stationarity_error(self) -> float:
        return 0.5 * float(np.abs(self.step_measure(self.pi) - self.pi).sum())

    def var_rho(self) -> np.ndarray:
        pi2 = self.exit_marginal(self.pi)
        second = pi2 @ self.enter**2
        mean = pi2 @ self.enter
        return np.repeat(np.clip(second - mean**2, 0.0, None), self.space.n_exit)

    def rho_sup(self) -> np.ndarray:
        return np.repeat(self.enter.max(axis=0), self.space.n_exit)


@dataclass
class ChainData:
    """Potential-theoretic ingredients shared by both excursion chains."""

    domain: Domain
    space: ExcursionSpace
    exit_dist: np.ndarray
    ebar_delta: np.ndarray
    cap_delta: float
    region: pot.InnerRegion


def chain_data(domain: Domain) -> ChainData:
    space = ExcursionSpace(domain.dB, domain.dDelta)
    region = pot.InnerRegion(domain)
    M = region.exit_distribution(domain.dB)
    cd = pot.cap_delta(domain)
    return ChainData(domain, space, M, cd.normalized, cd.total, region)


def _data(domain_or_data) -> ChainData:
    return domain_or_data if isinstance(domain_or_data, ChainData) else chain_data(domain_or_data)


def nu_Y_entry(domain: Domain, data: ChainData | None = None) -> np.ndarray:
    """P[X_{R_1} = x1] for the torus walk from the uniform distribution."""
    data = data or chain_data(domain)
    ts = pot.TorusSet(domain.geom.d, domain.geom.N, domain.dB)
    hit = np.clip(ts.harmonic_table(), 0.0, None)  # (|dB|, N^d)
    dmask = domain.delta.mask.ravel()
    from_delta = hit[:, dmask].sum(axis=1)
    # starts outside Delta first exit to the boundary of Delta
    exit_tab = data.region.harmonic_table()  # (|dDelta|, N^d)
    mass = exit_tab[:, ~dmask].sum(axis=1)
    from_rest = hit[:, domain.dDelta] @ mass
    out = (from_delta + from_rest) / domain.geom.volume
    return out / out.sum()


def build_Y_kernel(domain: Domain, mode: str = "exact", data: ChainData | None = None,
                   start: str = "nuY", samples: int = 2000, rng=None):
    """Torus excursion chain; ``start`` is 'nuY' (uniform walk) or 'pi'."""
    if mode == "mc":
        return estimate_kernel_mc(domain, "torus", samples, rng)
    if mode != "exact":
        raise ValueError(f"unknown mode {mode!r}")
    data = data or chain_data(domain)
    enter = np.clip(pot.TorusSet(domain.geom.d, domain.geom.N, domain.dB).hitting(domain.dDelta), 0.0, None)
    enter /= enter.sum(axis=1, keepdims=True)
    nu = None
    if start == "nuY":
        nu = (nu_Y_entry(domain, data)[:, None] * data.exit_dist).ravel()
    return ExcursionKernel(data.space, enter, data.exit_dist, data.ebar_delta, nu, "torus")


def build_Z_kernel(domain: Domain, mode: str = "exact", data: ChainData | None = None,
                   samples: int = 2000, rng=None, kill_radius: float | None = None):
    """Interlacement excursion chain, including the escape-and-restart term."""
    if mode == "mc":
        return estimate_kernel_mc(domain, "zd", samples, rng, kill_radius)
    if mode != "exact":
        raise ValueError(f"unknown mode {mode!r}")
    data = data or chain_data(domain)
    zs = pot.ZdSet(domain.box.points, domain.box.boundary_points)
    src = domain.coords(domain.dDelta)
    hit = np.clip(zs.hitting(src), 0.0, None)
    esc = zs.escape(src)
    ebar = zs.normalized_eq
    enter = hit + esc[:, None] * ebar[None, :]
    nu = (ebar[:, None] * data.exit_dist).ravel()
    k = ExcursionKernel(data.space, enter, data.exit_dist, data.ebar_delta, nu, "zd")
    k.escape = esc
    k.hit = hit
    k.ebar_B = ebar
    k.capacity = zs.capacity
    return k


def invariant_pi(domain_or_data) -> np.ndarray:
    data = _data(domain_or_data)
    return (data.ebar_delta[:, None] * data.exit_dist).ravel()


# ---------------------------------------------------------------- mixing


def _tv_rows(rows: np.ndarray, target: np.ndarray) -> float:
    return 0.5 * float(np.abs(rows - target[None, :]).sum(axis=1).max())


def tv_profile(kernel: ChainKernel, n_max: int) -> np.ndarray:
    """max_x ||P^n(x, .) - pi||_TV for n = 0..n_max."""
    out = [float(1.0 - kernel.pi.min())]
    if isinstance(kernel, ExcursionKernel):
        # P^n(x, .) = [Q_n(x2, .) ⊗ exit], so the distance is that of Q_n to ebar
        step = kernel.exit_dist @ kernel.enter
        Q = kernel.enter.copy()
        for _ in range(n_max):
            out.append(_tv_rows(Q, kernel.ebar_delta))
            Q = Q @ step
        return np.array(out)
    P = kernel.matrix()
    Pn = P.copy()
    for _ in range(n_max):
        out.append(_tv_rows(Pn, kernel.pi))
        Pn = Pn @ P
    return np.array(out)


def doeblin_mass(kernel: ChainKernel, steps: int = 1) -> float:
    """sum_y min_x P^steps(x, y), the coalescence probability per block of the Doeblin coupling."""
    if isinstance(kernel, ExcursionKernel):
        step = kernel.exit_dist @ kernel.enter
        Q = kernel.enter.copy()
        for _ in range(steps - 1):
            Q = Q @ step
        return float(Q.min(axis=0).sum())
    P = np.linalg.matrix_power(kernel.matrix(), steps)
    return float(P.min(axis=0).sum())


def mixing_time(kernel: ChainKernel, method: str = "exact", step_cap: int = 100_000,
                block_max: int = 64) -> int:
    """Least n with max_x ||P^n(x, .) - pi||_TV <= 1/4 (exact), or the coupling upper bound.

    The coupling bound uses the Doeblin coupling of P^m: both copies jump to a
    common state with probability alpha_m at every block of m steps, so they
    differ after k blocks with probability (1 - alpha_m)^k.
    """
    if method == "exact":
        if isinstance(kernel, ExcursionKernel):
            step = kernel.exit_dist @ kernel.enter
            if 1.0 - kernel.pi.min() <= 0.25:
                return 0
            Q = kernel.enter.copy()
            for n in range(1, step_cap + 1):
                if _tv_rows(Q, kernel.ebar_delta) <= 0.25:
                    return n
                Q = Q @ step
            raise NotConverged(f"TV distance above 1/4 after {step_cap} steps")
        P = kernel.matrix()
        if 1.0 - kernel.pi.min() <= 0.25:
            return 0
        Pn = P.copy()
        for n in range(1, step_cap + 1):
            if _tv_rows(Pn, kernel.pi) <= 0.25:
                return n
            Pn = Pn @ P
        raise NotConverged(f"TV distance above 1/4 after {step_cap} steps")
    if method != "coupling":
        raise ValueError(f"unknown method {method!r}")
    best = math.inf
    for m in range(1, block_max + 1):
        a = doeblin_mass(kernel, m)
        if a >= 1.0 - 1e-15:
            best = min(best, m)
        elif a > 0:
            blocks = math.ceil(math.log(0.25) / math.log1p(-a))
            best = min(best, m * blocks)
    if best == math.inf or best > step_cap:
        raise NotConverged("the Doeblin coupling does not coalesce within the step cap")
    return int(best)


def density_variance(kernel: ChainKernel) -> tuple[np.ndarray, float]:
    """(Var_pi rho_z for every z, max_z ||rho_z||_inf)."""
    return kernel.var_rho(), float(kernel.rho_sup().max())


# ---------------------------------------------------------------- excursion counts


def count_excursions_walk(domain: Domain, t: int, replicas: int, seed: int = 0) -> np.ndarray:
    """Samples of the number of returns R_i < t for the torus walk from a uniform start."""
    t = int(t)
    out = np.zeros(replicas, dtype=np.int64)
    if t <= 0:
        return out
    nbrs = domain.neighbors
    in_b = domain.box.mask.ravel()
    in_d = domain.delta.mask.ravel()
    d = domain.geom.d
    for r in range(replicas):
        rng = stream(seed, 1, r)
        pos = int(rng.integers(domain.geom.volume))
        phase, time0, count = 0, 0, 0
        cap = 4096
        kind = np.empty(cap, dtype=np.int8)
        times = np.empty(cap, dtype=np.int64)
        sites = np.empty(cap, dtype=np.int64)
        while time0 < t:
            n = min(_walk.CHUNK, t - time0)
            dirs = _walk.random_dirs(rng, n, d)
            done = 0
            while done < n:
                pos, phase, n_ev, used = _walk._torus_excursions(nbrs, pos, time0 + done, phase, in_b, in_d,
                                                                   dirs[done:], kind, times, sites, 0)
                count += int((kind[:n_ev] == _walk.EV_RETURN).sum())
                done += used
            time0 += n
        out[r] = count
    return out


def count_excursions_ri(domain: Domain, u: float, replicas: int, seed: int = 0,
                        kill_radius: float | None = None):
    """Samples of N'(u) and the per-trajectory counts T^(i)."""
    from .interlacements import RIExcursionSampler

    sampler = RIExcursionSampler(domain, kill_radius)
    totals = np.zeros(replicas, dtype=np.int64)
    per_traj = []
    for r in range(replicas):
        rng = stream(seed, 2, r)
        J = int(rng.poisson(u * sampler.capacity)) if u > 0 else 0
        for _ in range(J):
            T = len(sampler.trajectory(rng).pairs)
            per_traj.append(T)
            totals[r] += T
    return totals, np.array(per_traj, dtype=np.int64)


# ---------------------------------------------------------------- Monte Carlo kernels


@dataclass
class KernelEstimate:
    """Monte Carlo entrance/exit tables with counts; entries below 10 hits are untrusted."""

    lattice: str
    enter_counts: np.ndarray
    exit_counts: np.ndarray
    samples: int

    @property
    def enter(self) -> np.ndarray:
        return self.enter_counts / self.samples

    @property
    def exit_dist(self) -> np.ndarray:
        return self.exit_counts / self.samples

    @property
    def untrusted(self) -> tuple[np.ndarray, np.ndarray]:
        return self.enter_counts < 10, self.exit_counts < 10

    def enter_stderr(self) -> np.ndarray:
        p = self.enter
        return np.sqrt(p * (1 - p) / self.samples)


def estimate_kernel_mc(domain: Domain, lattice: str, samples: int, rng, kill_radius: float | None = None):
    from .rng import as_generator

    rng = as_generator(rng)
    nbrs = domain.neighbors
    dmask = domain.delta.mask.ravel()
    exit_col = {int(y): j for j, y in enumerate(domain.dDelta)}
    ex = np.zeros((domain.dB.size, domain.dDelta.size))
    for i, x in enumerate(domain.dB):
        for _ in range(samples):
            st = _walk.WalkState(int(x), 0, rng)
            hit, _ = _walk.run_until_hit(st, dmask, nbrs, 10**9)
            ex[i, exit_col[hit]] += 1
    if lattice == "torus":
        hk = pot.hitting_kernel(domain, lattice="torus", mode="mc", samples=samples, rng=rng)
        en = np.rint(hk.matrix * samples)
    else:
        from .interlacements import RIExcursionSampler

        sampler = RIExcursionSampler(domain, kill_radius)
        en = np.zeros((domain.dDelta.size, domain.dB.size))
        col = {int(y): j for j, y in enumerate(domain.dB)}
        for i, x in enumerate(domain.dDelta):
            for _ in range(samples):
                y = sampler.next_entry(domain.coords([x])[0], rng)
                if y is None:
                    y = int(domain.dB[rng.choice(domain.dB.size, p=sampler.ebar)])
                en[i, col[y]] += 1
    return KernelEstimate(lattice, en, ex, samples)


# ---------------------------------------------------------------- export


def export_kernel(kernel: ExcursionKernel, fh, mode: str = "exact", tol: float = 0.0) -> int:
    """Write a JSON header line then (i, j, p_ij) rows; returns the number of rows."""
    dom_header = {"lattice": kernel.lattice, "mode": mode, "states": kernel.space.size,
                  "n_entry": kernel.space.n_entry, "n_exit": kernel.space.n_exit}
    fh.write("# " + json.dumps(dom_header, sort_keys=True) + "\r\n")
    fh.write("i,j,p\r\n")
    rows = 0
    per_x2 = (kernel.enter[:, :, None] * kernel.exit_dist[None, :, :]).reshape(kernel.space.n_exit, -1)
    for i in range(kernel.space.size):
        p = per_x2[i % kernel.space.n_exit]
        nz = np.flatnonzero(p > tol)
        fh.writelines(f"{i},{j},{float(p[j])!r}\r\n" for j in nz)
        rows += nz.size
    return rows
