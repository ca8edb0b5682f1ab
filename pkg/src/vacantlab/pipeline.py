"""Vacant sets of the torus walk and of interlacements in B, built from one coupled pair of chains.

The torus excursion chain Y and the interlacement excursion chain Z are
driven by the same Poisson process through soft local times.  Each Y state
is then decorated with a path: a body from its entry point in B to its exit
point on Delta and a bridge from there to the next entry point.  Both are
drawn exactly with Doob h-transforms of the walk (no rejection).  The
interlacement excursions reuse the body of the first unused Y state equal
to their Z state, so the two vacant sets share most of their randomness.

Levels and windows, for level u, relative error eps and offset beta:

* the walk trace is X_t for floor(beta N^d) <= t <= floor((beta+u) N^d),
  and it is empty when u = 0;
* V^{u(1+eps)} removes the interlacement excursions with index in
  (N'(max(0, beta - u eps/2)), N'(beta + u + u eps/2)];
* V^{u(1-eps)} removes those in (N'(beta + u eps/2), N'(beta + u - u eps/2)].

Every replica draws its randomness from streams keyed by (seed, tag,
replica, index), so a replica's result does not depend on thread count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import chains as _chains
from . import potential as pot
from . import slt as _slt
from . import walk as _walk
from .errors import StageError
from .lattice import Domain, build_domain
from .rng import stream

# stream tags
_TAG_PPP, _TAG_START, _TAG_BODY, _TAG_BRIDGE, _TAG_FRESH, _TAG_LEVELS = 20, 21, 22, 23, 24, 25


def _staged(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - relabelled, not swallowed
        raise StageError(stage, exc) from exc


@dataclass(eq=False)
class PipelineContext:
    """Everything shared by the replicas: domain, kernels and h-function tables."""

    domain: Domain
    data: _chains.ChainData
    Y: _chains.ExcursionKernel
    Z: _chains.ExcursionKernel
    exit_h: np.ndarray  # (|dDelta|, N^d): x -> P_x[X_{H_Delta} = y2]
    entry_h: np.ndarray  # (|dB|, N^d): x -> P_x[X_{H_B} = y1] on the torus
    start_h: np.ndarray  # (|dB|, N^d): x -> P_x[X_{R_1} = y1]
    in_b: np.ndarray
    in_d: np.ndarray

    @property
    def volume(self) -> int:
        return self.domain.geom.volume

    @property
    def excursions_per_level(self) -> float:
        return self.data.cap_delta


def build_context(d: int, N: int, gamma: float, chi: float) -> PipelineContext:
    domain = _staged("geometry", build_domain, d, N, gamma, chi)

    def kernels():
        data = _chains.chain_data(domain)
        Y = _chains.build_Y_kernel(domain, data=data)
        Z = _chains.build_Z_kernel(domain, data=data)
        return data, Y, Z

    data, Y, Z = _staged("kernels", kernels)

    def tables():
        exit_h = np.clip(data.region.harmonic_table(), 0.0, None)
        entry_h = np.clip(pot.TorusSet(d, N, domain.dB).harmonic_table(), 0.0, None)
        dmask = domain.delta.mask.ravel()
        # before D_0 the walk runs to Delta, then it is a bridge to B
        start_h = np.where(dmask[None, :], entry_h, entry_h[:, domain.dDelta] @ exit_h)
        return exit_h, entry_h, start_h

    exit_h, entry_h, start_h = _staged("potential", tables)
    return PipelineContext(domain, data, Y, Z, exit_h, entry_h, start_h,
                           np.ascontiguousarray(domain.box.mask.ravel()),
                           np.ascontiguousarray(domain.delta.mask.ravel()))


@dataclass
class ReplicaOutcome:
    replica: int
    walk_vacant: int  # |V_N^u  within B|
    lower_vacant: dict = field(default_factory=dict)  # eps -> |V^{u(1+eps)} within B|
    upper_vacant: dict = field(default_factory=dict)  # eps -> |V^{u(1-eps)} within B|
    sandwich: dict = field(default_factory=dict)  # eps -> bool
    chain_good: dict = field(default_factory=dict)  # eps -> good event of the Y/Z ranges
    walk_excursions: int = 0
    ri_excursions: int = 0
    trajectories: int = 0
    fresh_bodies: int = 0


class _Replica:
    def __init__(self, ctx: PipelineContext, seed: int, r: int):
        self.ctx, self.seed, self.r = ctx, seed, r
        ppp_seed = int(np.random.SeedSequence([seed, _TAG_PPP, r]).generate_state(1)[0])
        self.ppp = _slt.FiberedPoissonProcess(ctx.Y.mu, ppp_seed)
        self.sY = _slt.SoftLocalTime.fresh(self.ppp)
        self.sZ = _slt.SoftLocalTime.fresh(self.ppp)
        self.bodies: dict[int, np.ndarray] = {}

    # chains, 0-based indices (state i here is Y_{i+1} in the 1-based notation)
    def y(self, i: int) -> int:
        if self.sY.k <= i:
            _staged("coupling", _slt.run_side, self.sY, self.ctx.Y, max(i + 1, 2 * self.sY.k))
        return self.sY.states[i]

    def z(self, i: int) -> int:
        if self.sZ.k <= i:
            _staged("coupling", _slt.run_side, self.sZ, self.ctx.Z, max(i + 1, 2 * self.sZ.k))
        return self.sZ.states[i]

    def body(self, state: int, rng) -> np.ndarray:
        ctx = self.ctx
        i1, i2 = ctx.Y.space.split(state)
        start = int(ctx.domain.dB[i1])
        return _staged("paths", _walk.doob_path, start, ctx.exit_h[i2], ctx.in_d, ctx.domain.neighbors, rng)

    def y_body(self, i: int) -> np.ndarray:
        if i not in self.bodies:
            self.bodies[i] = self.body(self.y(i), stream(self.seed, _TAG_BODY, self.r, i))
        return self.bodies[i]

    def bridge(self, i: int) -> np.ndarray:
        """Path from the exit point of Y_i to the entry point of Y_{i+1}."""
        ctx = self.ctx
        _, i2 = ctx.Y.space.split(self.y(i))
        j1, _ = ctx.Y.space.split(self.y(i + 1))
        rng = stream(self.seed, _TAG_BRIDGE, self.r, i)
        return _staged("paths", _walk.doob_path, int(ctx.domain.dDelta[i2]), ctx.entry_h[j1], ctx.in_b,
                       ctx.domain.neighbors, rng)

    def first_segment(self) -> np.ndarray:
        """X_0 .. X_{R_1} given the entry point of Y_1, X_0 uniform."""
        ctx = self.ctx
        j1, _ = ctx.Y.space.split(self.y(0))
        rng = stream(self.seed, _TAG_START, self.r)
        f = ctx.start_h[j1]
        x0 = int(rng.choice(f.size, p=f / f.sum()))
        nbrs = ctx.domain.neighbors
        head = _staged("paths", _walk.doob_path, x0, f, ctx.in_d, nbrs, rng)
        tail = _staged("paths", _walk.doob_path, int(head[-1]), ctx.entry_h[j1], ctx.in_b, nbrs, rng)
        return np.concatenate([head, tail[1:]])

    # walk side
    def walk_visits(self, t_lo: int, t_hi: int) -> tuple[np.ndarray, int]:
        """Sites of B visited at times t_lo..t_hi, and the number of Y states used."""
        in_b = self.ctx.in_b
        hit = np.zeros(in_b.size, dtype=bool)
        t0 = 0

        def mark(seg, t0):
            a, b = max(t_lo - t0, 0), min(t_hi - t0, len(seg) - 1)
            if a <= b:
                part = seg[a:b + 1]
                hit[part[in_b[part]]] = True

        seg = self.first_segment()
        mark(seg, t0)
        t0 += len(seg) - 1
        used = 0
        while t0 <= t_hi:
            seg = self.y_body(used)
            mark(seg, t0)
            t0 += len(seg) - 1
            used += 1
            if t0 > t_hi:
                break
            seg = self.bridge(used - 1)
            mark(seg, t0)
            t0 += len(seg) - 1
        return hit, used

    # interlacement side
    def break_points(self, n_traj: int) -> list[int]:
        """V_1 < V_2 < ... < V_n_traj: excursion indices after which the trajectory escapes."""
        Z = self.ctx.Z
        rng = stream(self.seed, _TAG_LEVELS, self.r, 1)
        out: list[int] = []
        i = 0
        while len(out) < n_traj:
            _, x2 = Z.space.split(self.z(i))
            y1, _ = Z.space.split(self.z(i + 1))
            escape = Z.escape[x2] * Z.ebar_B[y1]
            if rng.random() < escape / Z.enter[x2, y1]:
                out.append(i + 1)
            i += 1
        return out


def _count_upto(levels: np.ndarray, level: float) -> int:
    return int(np.searchsorted(levels, level, side="right"))


def run_replica(ctx: PipelineContext, u: float, epsilons, beta: float, seed: int, r: int) -> ReplicaOutcome:
    rep = _Replica(ctx, seed, r)
    V = ctx.volume
    n_b = int(ctx.in_b.sum())
    b_sites = np.flatnonzero(ctx.in_b)
    eps_max = max(epsilons)

    if u > 0:
        visited, n_walk = rep.walk_visits(math.floor(beta * V), math.floor((beta + u) * V))
    else:
        visited, n_walk = np.zeros(ctx.in_b.size, dtype=bool), 0
    walk_vac = ctx.in_b & ~visited

    # interlacement levels: a Poisson process of rate cap(B) on [0, top]
    top = beta + u + u * eps_max / 2
    lrng = stream(seed, _TAG_LEVELS, r, 0)
    J = int(lrng.poisson(ctx.Z.capacity * top)) if top > 0 else 0
    levels = np.sort(lrng.uniform(0.0, top, J))
    breaks = [0] + rep.break_points(J)

    def n_prime(level: float) -> int:
        return breaks[_count_upto(levels, max(level, 0.0))]

    # matching: excursion i of Z takes the body of the first unused Y index with the same state
    n_ri = breaks[-1]
    unused: dict[int, list[int]] = {}
    for j in range(n_walk):
        unused.setdefault(rep.y(j), []).append(j)
    for lst in unused.values():
        lst.reverse()
    ri_sites: list[np.ndarray] = []
    fresh = 0
    for i in range(n_ri):
        s = rep.z(i)
        pool = unused.get(s)
        if pool:
            path = rep.y_body(pool.pop())
        else:
            # the matching Y index lies beyond the walk horizon: its body is independent of the walk
            path = rep.body(s, stream(seed, _TAG_FRESH, r, i))
            fresh += 1
        ri_sites.append(path[ctx.in_b[path]])

    def vacant(lo: float, hi: float) -> np.ndarray:
        covered = np.zeros(ctx.in_b.size, dtype=bool)
        for i in range(n_prime(lo), n_prime(hi)):
            covered[ri_sites[i]] = True
        return ctx.in_b & ~covered

    out = ReplicaOutcome(r, int(walk_vac.sum()), walk_excursions=n_walk, ri_excursions=n_ri,
                         trajectories=J, fresh_bodies=fresh)
    n_chain = u * ctx.excursions_per_level
    for eps in epsilons:
        half = u * eps / 2
        if u > 0:
            lower = vacant(max(0.0, beta - half), beta + u + half)  # level u(1+eps)
            upper = vacant(beta + half, beta + u - half)  # level u(1-eps)
        else:
            lower = upper = ctx.in_b.copy()
        ok = bool(not (walk_vac & ~upper).any() and not (lower & ~walk_vac).any())
        out.lower_vacant[eps] = int(lower[b_sites].sum())
        out.upper_vacant[eps] = int(upper[b_sites].sum())
        out.sandwich[eps] = ok
        n = int(math.floor(n_chain))
        hi = int(math.floor(n * (1 + eps)))
        rep.z(hi)
        rep.y(n)
        out.chain_good[eps] = _slt.good_event(np.asarray(rep.sZ.states), np.asarray(rep.sY.states), n, eps)
    assert out.walk_vacant <= n_b
    return out


@dataclass
class PipelineResult:
    u: float
    epsilons: tuple
    beta: float
    seed: int
    outcomes: list

    def frequency(self, eps: float) -> float:
        return float(np.mean([o.sandwich[eps] for o in self.outcomes]))

    def stderr(self, eps: float) -> float:
        p = self.frequency(eps)
        return math.sqrt(p * (1 - p) / len(self.outcomes))

    def chain_good_frequency(self, eps: float) -> float:
        return float(np.mean([o.chain_good[eps] for o in self.outcomes]))

    def monotone_in_eps(self) -> bool:
        """Sandwich indicator non-decreasing in eps on every replica."""
        for o in self.outcomes:
            flags = [o.sandwich[e] for e in self.epsilons]
            if any(a and not b for a, b in zip(flags, flags[1:])):
                return False
        return True

    def rows(self) -> list[dict]:
        rows = []
        for o in self.outcomes:
            for e in self.epsilons:
                rows.append({"replica": o.replica, "epsilon": e, "u": self.u, "beta": self.beta,
                             "sandwich": int(o.sandwich[e]), "chainGood": int(o.chain_good[e]),
                             "walkVacant": o.walk_vacant, "riVacantLow": o.lower_vacant[e],
                             "riVacantHigh": o.upper_vacant[e], "walkExcursions": o.walk_excursions,
                             "riExcursions": o.ri_excursions, "trajectories": o.trajectories,
                             "freshBodies": o.fresh_bodies, "seed": self.seed})
        return rows


def run_pipeline(ctx: PipelineContext, u: float, epsilons, replicas: int, seed: int, beta: float = 0.0,
                 threads: int = 1) -> PipelineResult:
    eps = tuple(sorted(float(e) for e in epsilons))

    def one(r):
        return run_replica(ctx, u, eps, beta, seed, r)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            outcomes = list(pool.map(one, range(replicas)))
    else:
        outcomes = [one(r) for r in range(replicas)]
    return PipelineResult(u, eps, beta, seed, outcomes)
