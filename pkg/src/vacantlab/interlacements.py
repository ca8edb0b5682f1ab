"""Random interlacements seen from a finite set.

The trace of interlacements at level u on a finite K is the union of the
ranges of J ~ Poisson(u cap K) independent Z^d walks started from the
normalised equilibrium measure of K.

Walks are simulated inside a kill ball.  When a walk reaches the sphere at
w it is not simply discarded: it comes back to K with probability
P_w[H_K < inf], entering at a point drawn from the exact hitting
distribution.  Both quantities come from the Green matrix of K, so the
truncation introduces no bias.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import potential as pot
from . import walk as _walk
from .lattice import Domain
from .rng import as_generator, stream


@njit(cache=True, nogil=True)
def _ri_scan(pos, phase, in_b, in_d, N, center, r2, dirs, ev_kind, ev_site, ev_off, trace, n_ev, n_tr, keep):
    """Excursions between B and Delta of a Z^d walk; outside the box counts as Delta.

    phase 1 looks for B, phase 2 is inside an excursion.  With ``keep`` every
    excursion position (entry to exit, inclusive) is appended to ``trace`` and
    ``ev_off`` holds the trace length right after each event.  Returns (phase, n_ev, n_tr, steps, killed).
    """
    cap = ev_kind.shape[0]
    tcap = trace.shape[0]
    for i in range(dirs.shape[0]):
        if n_ev >= cap - 1 or (keep and n_tr >= tcap - 1):
            return phase, n_ev, n_tr, i, False
        idx = _walk._zd_index(pos, N)
        if phase == 2:
            if keep:
                trace[n_tr] = idx
                n_tr += 1
            if idx < 0 or in_d[idx]:
                ev_kind[n_ev] = 0
                ev_site[n_ev] = idx
                ev_off[n_ev] = n_tr
                n_ev += 1
                phase = 1
        else:
            if idx >= 0 and in_b[idx]:
                ev_kind[n_ev] = 1
                ev_site[n_ev] = idx
                phase = 2
                if keep:
                    trace[n_tr] = idx
                    n_tr += 1
                ev_off[n_ev] = n_tr
                n_ev += 1
            elif _walk._sq_from(pos, center) >= r2:
                return phase, n_ev, n_tr, i, True
        _walk._zd_step(pos, dirs[i])
    return phase, n_ev, n_tr, dirs.shape[0], False


@dataclass
class RITrajectory:
    pairs: list  # (entry flat index, exit flat index) per excursion
    paths: list | None = None  # flat indices of each excursion, entry to exit


class RIExcursionSampler:
    """Excursions between B and Delta of interlacement trajectories hitting B."""

    def __init__(self, domain: Domain, kill_radius: float | None = None):
        g = domain.geom
        self.domain = domain
        self.zs = pot.ZdSet(domain.box.points, domain.box.boundary_points)
        self.capacity = self.zs.capacity
        self.ebar = self.zs.normalized_eq
        self.entry = domain.dB
        self.in_b = np.ascontiguousarray(domain.box.mask.ravel())
        self.in_d = np.ascontiguousarray(domain.delta.mask.ravel())
        self.center = np.full(g.d, (g.N - 1) / 2.0)
        self.kill_radius = float(kill_radius or math.sqrt(g.d) * g.N)
        if self.kill_radius <= math.sqrt(g.d) * (g.N - 1) / 2.0:
            raise ValueError("the kill ball must contain the whole box")
        self.r2 = self.kill_radius**2

    def _return_point(self, w: np.ndarray, rng) -> int | None:
        """Entry point into B after reaching w on the sphere, or None if the walk escapes."""
        hit = np.clip(self.zs.hitting(w[None, :])[0], 0.0, None)
        p_ret = hit.sum()
        if rng.random() >= p_ret:
            return None
        return int(self.entry[rng.choice(hit.size, p=hit / p_ret)])

    def _start(self, rng) -> int:
        return int(self.entry[rng.choice(self.entry.size, p=self.ebar)])

    def trajectory(self, rng, keep_paths: bool = False, start: int | None = None) -> RITrajectory:
        N, d = self.domain.geom.N, self.domain.geom.d
        x = self._start(rng) if start is None else int(start)
        pos = np.array(np.unravel_index(x, self.domain.geom.shape), dtype=np.int64)
        phase = 1
        kind = np.empty(1024, dtype=np.int8)
        site = np.empty(1024, dtype=np.int64)
        off = np.empty(1024, dtype=np.int64)
        trace = np.empty(1 << 16 if keep_paths else 1, dtype=np.int64)
        pairs: list = []
        paths: list = [] if keep_paths else None
        pending = -1
        cur: list = []
        while True:
            dirs = _walk.random_dirs(rng, _walk.CHUNK, d)
            done = 0
            killed = False
            while done < dirs.size and not killed:
                phase, n_ev, n_tr, used, killed = _ri_scan(pos, phase, self.in_b, self.in_d, N, self.center,
                                                           self.r2, dirs[done:], kind, site, off, trace, 0, 0,
                                                           keep_paths)
                done += used
                last = 0
                for e in range(n_ev):
                    if keep_paths:
                        cur.extend(trace[last:off[e]].tolist())
                        last = off[e]
                    if kind[e] == 1:
                        pending = int(site[e])
                    else:
                        pairs.append((pending, int(site[e])))
                        if keep_paths:
                            paths.append(cur)
                            cur = []
                if keep_paths:
                    cur.extend(trace[last:n_tr].tolist())
            if killed:
                y = self._return_point(pos.astype(np.int64), rng)
                if y is None:
                    return RITrajectory(pairs, paths)
                pos = np.array(np.unravel_index(y, self.domain.geom.shape), dtype=np.int64)
                phase = 1

    def next_entry(self, w, rng) -> int | None:
        """First entrance point into B of a Z^d walk from w (None if it never enters)."""
        pos = np.asarray(w, dtype=np.int64).copy()
        korigin = np.zeros(pos.size, dtype=np.int64)
        status, pos = _walk.zd_run_until(pos, self.domain.box.mask, korigin, self.center, self.kill_radius, rng)
        if status == 1:
            return int(np.ravel_multi_index(tuple(pos), self.domain.geom.shape))
        return self._return_point(pos, rng)


@dataclass
class ExcursionStream:
    """Interlacement trajectories hitting B, ordered by their level."""

    levels: np.ndarray
    trajectories: list
    n_exit: int
    entry_index: dict = field(repr=False, default_factory=dict)
    exit_index: dict = field(repr=False, default_factory=dict)

    @property
    def counts(self) -> np.ndarray:
        """T^(i): number of excursions of each trajectory."""
        return np.array([len(t.pairs) for t in self.trajectories], dtype=np.int64)

    def J(self, u: float) -> int:
        return int(np.searchsorted(self.levels, u, side="right"))

    def n_prime(self, u: float) -> int:
        return int(self.counts[:self.J(u)].sum())

    def states(self) -> np.ndarray:
        """The concatenated excursion chain as flat indices into the pair space."""
        out = [self.entry_index[a] * self.n_exit + self.exit_index[b]
               for t in self.trajectories for a, b in t.pairs]
        return np.array(out, dtype=np.int64)


def sample_excursion_stream(domain: Domain, u_max: float, kill_radius: float | None = None,
                            seed: int = 0, keep_paths: bool = False,
                            sampler: RIExcursionSampler | None = None) -> ExcursionStream:
    sampler = sampler or RIExcursionSampler(domain, kill_radius)
    rng = stream(seed, 3)
    J = int(rng.poisson(u_max * sampler.capacity)) if u_max > 0 else 0
    levels = np.sort(rng.uniform(0.0, u_max, J))
    trajs = [sampler.trajectory(rng, keep_paths) for _ in range(J)]
    return ExcursionStream(levels, trajs, domain.dDelta.size,
                           {int(y): i for i, y in enumerate(domain.dB)},
                           {int(y): i for i, y in enumerate(domain.dDelta)})


# ---------------------------------------------------------------- vacant sets of a finite K


def zd_inner_boundary(K: np.ndarray) -> np.ndarray:
    """Points of K (Z^d coordinates) having a neighbour outside K."""
    K = np.asarray(K, dtype=np.int64)
    members = set(map(tuple, K.tolist()))
    d = K.shape[1]
    out = []
    for p in K.tolist():
        for a in range(d):
            for s in (-1, 1):
                q = list(p)
                q[a] += s
                if tuple(q) not in members:
                    out.append(p)
                    break
            else:
                continue
            break
    return np.array(out, dtype=np.int64).reshape(-1, d)


@dataclass
class VacantSample:
    base: np.ndarray  # K, (k, d)
    u: float
    vacant: np.ndarray  # bool per point of K
    J: int
    first_level: np.ndarray  # level of the first trajectory visiting each point (inf if none)

    def at(self, u: float) -> np.ndarray:
        """Vacant indicator at a level u <= self.u (nested construction)."""
        if u > self.u:
            raise ValueError("level above the sampled one")
        return self.first_level > u


class VacantSampler:
    def __init__(self, K, kill_radius: float | None = None):
        self.K = np.asarray(K, dtype=np.int64).reshape(-1, np.asarray(K).shape[-1])
        d = self.K.shape[1]
        self.boundary = zd_inner_boundary(self.K)
        self.zs = pot.ZdSet(self.K, self.boundary)
        self.capacity = self.zs.capacity
        self.ebar = self.zs.normalized_eq
        self.center = self.K.mean(axis=0)
        span = math.sqrt(((self.K - self.center) ** 2).sum(axis=1).max())
        self.kill_radius = float(kill_radius or max(10.0, 3.0 * span + 5.0))
        self.origin = self.K.min(axis=0)
        self.shape = tuple(self.K.max(axis=0) - self.origin + 1)
        self.kmask = np.zeros(self.shape, dtype=bool)
        self.kmask[tuple((self.K - self.origin).T)] = True
        self.index = np.full(self.shape, -1, dtype=np.int64)
        self.index[tuple((self.K - self.origin).T)] = np.arange(len(self.K))

    def trace(self, rng) -> np.ndarray:
        """Bool mask over K of the sites visited by one trajectory."""
        visited = np.zeros(int(np.prod(self.shape)), dtype=np.uint8)
        start = self.boundary[rng.choice(len(self.boundary), p=self.ebar)]
        pos = start
        while True:
            w = _walk.zd_mark_range(pos, self.kmask, self.origin, self.center, self.kill_radius, rng, visited)
            # resume from the exact re-entry law at the sphere
            hit = np.clip(self.zs.hitting(w[None, :])[0], 0.0, None)
            if rng.random() >= hit.sum():
                break
            pos = self.boundary[rng.choice(hit.size, p=hit / hit.sum())]
        flat = self.index.ravel()
        mask = np.zeros(len(self.K), dtype=bool)
        mask[flat[visited.astype(bool) & (flat >= 0)]] = True
        return mask


def sample_vacant(K, u: float, kill_radius: float | None = None, seed=None,
                  sampler: VacantSampler | None = None) -> VacantSample:
    """Vacant set of interlacements at level u restricted to K (nested in u)."""
    sampler = sampler or VacantSampler(K, kill_radius)
    rng = as_generator(seed)
    J = int(rng.poisson(u * sampler.capacity)) if u > 0 else 0
    levels = np.sort(rng.uniform(0.0, u, J))
    first = np.full(len(sampler.K), np.inf)
    for lev in levels:
        hit = sampler.trace(rng)
        first[hit & (first == np.inf)] = lev
    return VacantSample(sampler.K, u, first > u, J, first)


# ---------------------------------------------------------------- dump


def dump_vacant_rle(vacant: np.ndarray, fh, header: dict) -> None:
    """JSON header line, then run lengths of the flattened mask starting with a run of 0s."""
    flat = np.asarray(vacant, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    head = dict(header)
    head["shape"] = list(np.shape(vacant))
    fh.write(json.dumps(head, sort_keys=True) + "\n")
    fh.write(" ".join(map(str, runs)) + "\n")


def load_vacant_rle(fh) -> tuple[dict, np.ndarray]:
    head = json.loads(fh.readline())
    runs = [int(t) for t in fh.readline().split()]
    vals = np.zeros(sum(runs), dtype=bool)
    pos, bit = 0, False
    for r in runs:
        vals[pos:pos + r] = bit
        pos += r
        bit = not bit
    return head, vals.reshape(head["shape"])
