"""Simple random walk on the torus and on Z^d, hitting times, excursion decomposition.

Torus sites are flat indices (see :mod:`vacantlab.lattice`); a step in
direction ``j`` moves along axis ``j // 2``, by +1 for even ``j`` and -1 for
odd ``j``.  Random directions are drawn in numpy from the caller's
generator and handed to the jitted loops in chunks, which keeps every run
reproducible from its seed.

Trajectory dump format: a raw stream of little-endian int32 values, ``d``
per site, no header.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numba import njit

from .errors import StepCapExceeded, Timeout
from .rng import as_generator

CHUNK = 1 << 16

# event kinds emitted by the excursion scanners
EV_DEPART = 0  # first entrance to Delta (a D_i)
EV_RETURN = 1  # first entrance to B after a departure (an R_i)
EV_KILL = 2  # left the kill ball


def random_dirs(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    return rng.integers(0, 2 * d, size=n, dtype=np.uint8)


# ---------------------------------------------------------------- torus kernels


@njit(cache=True, nogil=True)
def _torus_run_until(nbrs, pos, target, dirs):
    for i in range(dirs.shape[0]):
        if target[pos]:
            return pos, i, True
        pos = nbrs[pos, dirs[i]]
    if target[pos]:
        return pos, dirs.shape[0], True
    return pos, dirs.shape[0], False


@njit(cache=True, nogil=True)
def _torus_excursions(nbrs, pos, time0, phase, in_b, in_d, dirs, ev_kind, ev_time, ev_site, n_ev):
    """Scan X_time0, X_time0+1, ... and record departures/returns.

    phase 0: before D_0, 1: outside looking for B, 2: inside an excursion.
    Stops early when the event buffers are full.  Returns the state after the
    last processed position; ``steps`` positions were processed.
    """
    cap = ev_kind.shape[0]
    for i in range(dirs.shape[0]):
        if n_ev >= cap:
            return pos, phase, n_ev, i
        if phase == 0:
            if in_d[pos]:
                ev_kind[n_ev] = 0
                ev_time[n_ev] = time0 + i
                ev_site[n_ev] = pos
                n_ev += 1
                phase = 1
        elif phase == 1:
            if in_b[pos]:
                ev_kind[n_ev] = 1
                ev_time[n_ev] = time0 + i
                ev_site[n_ev] = pos
                n_ev += 1
                phase = 2
        else:
            if in_d[pos]:
                ev_kind[n_ev] = 0
                ev_time[n_ev] = time0 + i
                ev_site[n_ev] = pos
                n_ev += 1
                phase = 1
        pos = nbrs[pos, dirs[i]]
    return pos, phase, n_ev, dirs.shape[0]


@njit(cache=True, nogil=True)
def _torus_first_visits(nbrs, pos, time0, dirs, first):
    """Record in ``first`` the first time each site is visited (-1 = not yet)."""
    for i in range(dirs.shape[0]):
        if first[pos] < 0:
            first[pos] = time0 + i
        pos = nbrs[pos, dirs[i]]
    return pos


@njit(cache=True, nogil=True)
def _doob_walk(nbrs, pos, h, stop, unif, out, n_out):
    """Walk with transition p(x,y) h(y) / sum_y' p(x,y') h(y') until ``stop``.

    Appends visited sites to ``out`` (the start is assumed already written).
    Returns (pos, n_out, stopped, used uniforms).
    """
    deg = nbrs.shape[1]
    w = np.empty(deg)
    for i in range(unif.shape[0]):
        if stop[pos]:
            return pos, n_out, True, i
        if n_out >= out.shape[0]:
            return pos, n_out, False, i
        tot = 0.0
        for j in range(deg):
            w[j] = h[nbrs[pos, j]]
            tot += w[j]
        r = unif[i] * tot
        acc = 0.0
        nxt = nbrs[pos, deg - 1]
        for j in range(deg):
            acc += w[j]
            if r < acc and w[j] > 0.0:
                nxt = nbrs[pos, j]
                break
        pos = nxt
        out[n_out] = pos
        n_out += 1
    return pos, n_out, bool(stop[pos]), unif.shape[0]


# ---------------------------------------------------------------- Z^d kernels


@njit(cache=True, nogil=True)
def _zd_index(pos, N):
    """Flat index of pos in the box {0..N-1}^d, or -1 outside it."""
    idx = 0
    for a in range(pos.shape[0]):
        c = pos[a]
        if c < 0 or c >= N:
            return -1
        idx = idx * N + c
    return idx


@njit(cache=True, nogil=True)
def _sq_from(pos, center):
    s = 0.0
    for a in range(pos.shape[0]):
        t = pos[a] - center[a]
        s += t * t
    return s


@njit(cache=True, nogil=True)
def _zd_step(pos, direction):
    a = direction >> 1
    if direction & 1:
        pos[a] -= 1
    else:
        pos[a] += 1


@njit(cache=True, nogil=True)
def _zd_excursions(pos, phase, in_b, in_d, N, center, r2, dirs, ev_kind, ev_site, n_ev, visited, steps0):
    """Excursions of a Z^d walk between B and Delta, killed outside the ball.

    B and Delta are masks over the box {0..N-1}^d; outside the box every site
    is in Delta.  phase 1: looking for B, 2: inside an excursion.
    ``visited`` (length N^d, uint8) marks B sites seen during excursions.
    Returns (phase, n_ev, steps processed, killed).
    """
    cap = ev_kind.shape[0]
    for i in range(dirs.shape[0]):
        if n_ev >= cap - 1:
            return phase, n_ev, i, False
        idx = _zd_index(pos, N)
        if phase == 2:
            if idx < 0 or in_d[idx]:
                ev_kind[n_ev] = 0
                ev_site[n_ev] = idx
                n_ev += 1
                phase = 1
            elif in_b[idx]:
                visited[idx] = 1
        else:
            if idx >= 0 and in_b[idx]:
                ev_kind[n_ev] = 1
                ev_site[n_ev] = idx
                n_ev += 1
                phase = 2
                visited[idx] = 1
            elif _sq_from(pos, center) >= r2:
                ev_kind[n_ev] = 2
                ev_site[n_ev] = -1
                n_ev += 1
                return phase, n_ev, i, True
        _zd_step(pos, dirs[i])
    return phase, n_ev, dirs.shape[0], False


@njit(cache=True, nogil=True)
def _zd_run(pos, dirs, kmask, kshape, korigin, center, r2, skip_first, visited):
    """Run a Z^d walk until it is in K (status 1) or leaves the kill ball (status 2).

    K is a mask over the box ``korigin + [0, kshape)``.  If ``visited`` has
    nonzero length, every K site seen is marked and the walk is only stopped
    by the kill ball.  ``skip_first`` ignores K at the first position (used for
    return times).  Status 0 means the chunk ran out.
    """
    d = pos.shape[0]
    mark = visited.shape[0] > 0
    for i in range(dirs.shape[0]):
        if not (skip_first and i == 0):
            idx = 0
            inside = True
            for a in range(d):
                c = pos[a] - korigin[a]
                if c < 0 or c >= kshape[a]:
                    inside = False
                    break
                idx = idx * kshape[a] + c
            if inside and kmask[idx]:
                if mark:
                    visited[idx] = 1
                else:
                    return 1, i
        if _sq_from(pos, center) >= r2:
            return 2, i
        _zd_step(pos, dirs[i])
    return 0, dirs.shape[0]


# ---------------------------------------------------------------- public API


@dataclass
class WalkState:
    """Position (flat torus index), elapsed time, and the owning generator."""

    position: int
    time: int = 0
    rng: np.random.Generator = field(default_factory=lambda: as_generator(None))


def run_until_hit(state: WalkState, target: np.ndarray, nbrs: np.ndarray, max_steps: int) -> tuple[int, int]:
    """Advance ``state`` to the first k >= 0 with X_k in ``target``.

    ``target`` is a flat boolean mask over the torus.  Returns the hit site
    and the elapsed number of steps; raises :class:`Timeout` after
    ``max_steps`` steps without a hit.
    """
    d = nbrs.shape[1] // 2
    pos = int(state.position)
    elapsed = 0
    while True:
        n = min(CHUNK, max_steps - elapsed)
        if n <= 0:
            if target[pos]:
                break
            state.position, state.time = pos, state.time + elapsed
            raise Timeout(f"no hit within {max_steps} steps")
        dirs = random_dirs(state.rng, n, d)
        pos, used, hit = _torus_run_until(nbrs, pos, target, dirs)
        elapsed += used
        if hit:
            break
    state.position = int(pos)
    state.time += elapsed
    return int(pos), elapsed


@dataclass
class ExcursionRecord:
    """One excursion from B to Delta: times R_i < D_i and their endpoints."""

    return_time: int
    departure_time: float  # math.inf when the path ends mid-excursion
    entry_point: object
    exit_point: object = None
    path: Sequence | None = None

    @property
    def finished(self) -> bool:
        return math.isfinite(self.departure_time)


def _membership(container):
    if isinstance(container, np.ndarray) and container.dtype == bool:
        flat = container.ravel()
        return lambda x: bool(flat[x])
    return lambda x: x in container


def excursion_decompose(trajectory: Sequence, B, Delta, keep_paths: bool = False):
    """Split a path into successive excursions between B and Delta.

    Returns ``(D_0, records)`` with D_0 = H_Delta (math.inf if the path never
    reaches Delta).  ``B`` and ``Delta`` are containers or flat boolean masks.
    """
    in_b, in_d = _membership(B), _membership(Delta)
    traj = list(trajectory)
    d0 = math.inf
    records: list[ExcursionRecord] = []
    phase = 0
    for k, x in enumerate(traj):
        if phase == 0:
            if in_d(x):
                d0 = k
                phase = 1
        elif phase == 1:
            if in_b(x):
                records.append(ExcursionRecord(k, math.inf, x))
                phase = 2
        elif in_d(x):
            rec = records[-1]
            rec.departure_time = k
            rec.exit_point = x
            phase = 1
    if keep_paths:
        for rec in records:
            end = len(traj) if not rec.finished else int(rec.departure_time) + 1
            rec.path = traj[rec.return_time:end]
    return d0, records


def split_path(trajectory: Sequence, records: Iterable[ExcursionRecord]) -> list[list]:
    """Cut a path into alternating bridge / excursion pieces.

    Piece 0 runs up to (excluding) R_1, then each excursion [R_i, D_i) and
    the following bridge [D_i, R_{i+1}).  Concatenation gives the path back.
    """
    traj = list(trajectory)
    cuts = []
    for rec in records:
        cuts.append(rec.return_time)
        if rec.finished:
            cuts.append(int(rec.departure_time))
    pieces, start = [], 0
    for c in cuts:
        pieces.append(traj[start:c])
        start = c
    pieces.append(traj[start:])
    return pieces


def torus_trajectory(start: int, n_steps: int, nbrs: np.ndarray, rng) -> np.ndarray:
    """Flat indices X_0, ..., X_n of a torus walk."""
    rng = as_generator(rng)
    d = nbrs.shape[1] // 2
    dirs = random_dirs(rng, n_steps, d)
    out = np.empty(n_steps + 1, dtype=np.int64)
    out[0] = start
    _fill_torus_path(nbrs, start, dirs, out)
    return out


@njit(cache=True, nogil=True)
def _fill_torus_path(nbrs, pos, dirs, out):
    for i in range(dirs.shape[0]):
        pos = nbrs[pos, dirs[i]]
        out[i + 1] = pos


@dataclass
class ZdTrajectory:
    points: np.ndarray  # (n, d) positions strictly inside the kill ball
    escaped: bool


def walk_on_zd(start, kill_radius: float, rng=None, center=None, step_cap: int = 10**8) -> ZdTrajectory:
    """Z^d walk from ``start`` recorded until it first reaches |x - center| >= R."""
    if not math.isfinite(kill_radius) or kill_radius <= 0:
        raise ValueError("kill_radius must be a finite positive number")
    rng = as_generator(rng)
    pos = np.array(start, dtype=np.int64)
    d = pos.shape[0]
    center = np.zeros(d) if center is None else np.asarray(center, dtype=float)
    r2 = float(kill_radius) ** 2
    pts = []
    n = 0
    while True:
        if ((pos - center) ** 2).sum() >= r2:
            return ZdTrajectory(np.array(pts, dtype=np.int64).reshape(-1, d), True)
        if n >= step_cap:
            raise StepCapExceeded(f"walk did not leave B(center, {kill_radius}) within {step_cap} steps")
        pts.append(pos.copy())
        k = rng.integers(0, 2 * d)
        pos[k >> 1] += -1 if k & 1 else 1
        n += 1


def zd_run_until(start, kmask: np.ndarray, korigin, center, kill_radius: float, rng,
                 skip_first: bool = False, step_cap: int = 10**9) -> tuple[int, np.ndarray]:
    """Run a Z^d walk until it is in K (1) or leaves the kill ball (2)."""
    pos = np.array(start, dtype=np.int64)
    d = pos.shape[0]
    kflat = np.ascontiguousarray(kmask.ravel())
    kshape = np.array(kmask.shape, dtype=np.int64)
    korigin = np.asarray(korigin, dtype=np.int64)
    center = np.asarray(center, dtype=float)
    r2 = float(kill_radius) ** 2
    empty = np.zeros(0, dtype=np.uint8)
    done = 0
    first = skip_first
    while done < step_cap:
        dirs = random_dirs(rng, CHUNK, d)
        status, used = _zd_run(pos, dirs, kflat, kshape, korigin, center, r2, first, empty)
        first = False
        done += used
        if status:
            return int(status), pos
    raise StepCapExceeded(f"no hit or kill within {step_cap} steps")


def zd_mark_range(start, kmask: np.ndarray, korigin, center, kill_radius: float, rng,
                  visited: np.ndarray, step_cap: int = 10**9) -> np.ndarray:
    """Mark in ``visited`` every K site on a Z^d walk; returns the position where it left the kill ball."""
    pos = np.array(start, dtype=np.int64)
    d = pos.shape[0]
    kflat = np.ascontiguousarray(kmask.ravel())
    kshape = np.array(kmask.shape, dtype=np.int64)
    korigin = np.asarray(korigin, dtype=np.int64)
    center = np.asarray(center, dtype=float)
    r2 = float(kill_radius) ** 2
    done = 0
    while done < step_cap:
        dirs = random_dirs(rng, CHUNK, d)
        status, used = _zd_run(pos, dirs, kflat, kshape, korigin, center, r2, False, visited)
        done += used
        if status == 2:
            return pos
    raise StepCapExceeded(f"walk did not leave the kill ball within {step_cap} steps")


def doob_path(start: int, h: np.ndarray, stop: np.ndarray, nbrs: np.ndarray, rng,
              step_cap: int = 10**8) -> np.ndarray:
    """Torus walk from ``start`` h-transformed by ``h`` until it enters ``stop``.

    With h(x) = P_x[X_H = y] for the hitting time H of ``stop`` this samples
    the path conditioned on ending at y.  Returns the visited sites, start
    and end included.
    """
    if h[start] <= 0:
        raise ValueError("h vanishes at the start")
    out = np.empty(1024, dtype=np.int64)
    out[0] = start
    n_out, pos = 1, int(start)
    while True:
        unif = rng.random(_walk_chunk(n_out))
        done = 0
        while done < unif.size:
            pos, n_out, stopped, used = _doob_walk(nbrs, pos, h, stop, unif[done:], out, n_out)
            done += used
            if stopped:
                return out[:n_out].copy()
            if n_out >= out.size:
                if out.size >= step_cap:
                    raise StepCapExceeded(f"conditioned walk longer than {step_cap} steps")
                out = np.concatenate([out, np.empty_like(out)])


def _walk_chunk(n: int) -> int:
    return min(CHUNK, max(1024, n))


def dump_trajectory(points: np.ndarray, fh) -> None:
    """Write an (n, d) coordinate array as little-endian int32."""
    fh.write(np.ascontiguousarray(points, dtype="<i4").tobytes())


def load_trajectory(fh, d: int) -> np.ndarray:
    return np.frombuffer(fh.read(), dtype="<i4").reshape(-1, d).astype(np.int64)
