"""Vacant-set clusters: union-find labelling, wrapped Euclidean diameters, eta-hat.

The observable is the frequency with which the vacant cluster of the origin
(flat site 0) has torus-Euclidean diameter at least N/4.  If the origin
itself is visited its cluster is empty and counts as diameter 0.

All levels of a u-grid are read off a single walk per replica: the first
visit time of every site is recorded once, and the vacant set at level u is
``{x : first[x] > floor(u N^d)}`` (never-visited sites have first = -1 and
are always vacant).  At u = 0 the trace is taken to be empty.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numba import njit

from . import walk as _walk
from .lattice import neighbor_table, torus_coords
from .rng import stream

EXACT_LIMIT = 10_000
CSV_FIELDS = ("d", "N", "u", "replicas", "etaHat", "stderr", "meanLargestComponent", "seed")


# ---------------------------------------------------------------- union-find


@njit(cache=True, nogil=True)
def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


@njit(cache=True, nogil=True)
def _label(open_, nbrs, labels, sizes):
    """Union over the "+e_i" neighbours of every open site; returns #components.

    ``labels`` gets compact ids in order of the smallest site of each
    component (-1 on closed sites); ``sizes[:k]`` their sizes.
    """
    n = open_.shape[0]
    parent = np.arange(n)
    half = nbrs.shape[1] // 2
    for x in range(n):
        if not open_[x]:
            continue
        for a in range(half):
            y = nbrs[x, 2 * a]
            if y < 0 or not open_[y]:
                continue
            rx = _find(parent, x)
            ry = _find(parent, y)
            if rx != ry:
                if rx < ry:
                    parent[ry] = rx
                else:
                    parent[rx] = ry
    k = 0
    for x in range(n):
        if not open_[x]:
            labels[x] = -1
            continue
        r = _find(parent, x)
        if r == x:
            labels[x] = k
            sizes[k] = 0
            k += 1
        else:
            labels[x] = labels[r]
        sizes[labels[x]] += 1
    return k


def _box_neighbors(shape: tuple[int, ...]) -> np.ndarray:
    """Neighbour table without wrap-around; -1 off the box."""
    d = len(shape)
    coords = torus_coords(shape)
    idx = np.arange(int(np.prod(shape)), dtype=np.int64).reshape(shape)
    cols = []
    for axis in range(d):
        for step in (1, -1):
            c = coords.copy()
            c[:, axis] += step
            ok = (c[:, axis] >= 0) & (c[:, axis] < shape[axis])
            col = np.full(len(coords), -1, dtype=np.int64)
            col[ok] = idx[tuple(c[ok].T)]
            cols.append(col)
    return np.ascontiguousarray(np.stack(cols, axis=1))


def _neighbors(shape: tuple[int, ...], topology: str) -> np.ndarray:
    if topology == "torus":
        if len(set(shape)) != 1:
            raise ValueError("torus topology needs a cubic array")
        return neighbor_table(len(shape), shape[0])
    if topology == "box":
        return _box_neighbors(shape)
    raise ValueError(f"unknown topology {topology!r}")


@dataclass(eq=False)
class ClusterStats:
    """Component labels of a vacant indicator.

    ``labels`` is flat (C order); closed sites carry -1.  Component ids are
    ordered by their smallest flat index, so the labelling is deterministic.
    """

    shape: tuple[int, ...]
    topology: str
    labels: np.ndarray
    sizes: np.ndarray

    @property
    def n_components(self) -> int:
        return len(self.sizes)

    @property
    def largest_component_size(self) -> int:
        return int(self.sizes.max()) if len(self.sizes) else 0

    def members(self, component: int) -> np.ndarray:
        return np.flatnonzero(self.labels == component)

    def component_of(self, site: int) -> int:
        return int(self.labels[site])

    @cached_property
    def origin_component_diameter(self) -> float:
        comp = self.component_of(0)
        if comp < 0:
            return 0.0
        return euclid_diameter(torus_coords(self.shape)[self.members(comp)], self._period)

    @property
    def _period(self) -> int | None:
        return self.shape[0] if self.topology == "torus" else None


def components(vacant: np.ndarray, topology: str = "torus") -> ClusterStats:
    """Nearest-neighbour components of a boolean array (torus wraps every axis)."""
    vacant = np.asarray(vacant, dtype=bool)
    shape = vacant.shape
    nbrs = _neighbors(shape, topology)
    flat = np.ascontiguousarray(vacant.ravel())
    labels = np.empty(flat.size, dtype=np.int64)
    sizes = np.empty(flat.size, dtype=np.int64)
    k = _label(flat, nbrs, labels, sizes)
    return ClusterStats(shape, topology, labels, sizes[:k].copy())


# ---------------------------------------------------------------- diameters


@njit(cache=True, nogil=True)
def _sq(a, b, N):
    s = 0
    for i in range(a.shape[0]):
        t = abs(a[i] - b[i])
        if N > 0 and N - t < t:
            t = N - t
        s += t * t
    return s


@njit(cache=True, nogil=True)
def _farthest(pts, src, N):
    best = -1
    arg = 0
    for j in range(pts.shape[0]):
        s = _sq(pts[src], pts[j], N)
        if s > best:
            best = s
            arg = j
    return arg, best


@njit(cache=True, nogil=True)
def _exact_sq_diameter(pts, N, stop_at):
    """Max pairwise squared distance; returns early once it reaches ``stop_at`` (if > 0)."""
    best = 0
    n = pts.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            s = _sq(pts[i], pts[j], N)
            if s > best:
                best = s
                if 0 < stop_at <= best:
                    return best
    return best


def _extent(values: np.ndarray, N: int | None) -> int:
    """Largest pairwise coordinate gap along one axis (wrapped if N is given)."""
    u = np.unique(values)
    if N is None:
        return int(u[-1] - u[0])
    if len(u) == N:
        return N // 2
    # the farthest pair straddles the largest empty arc, or is capped at N/2
    gaps = np.diff(np.concatenate([u, [u[0] + N]]))
    return int(min(N - gaps.max(), N // 2))


def diameter_bounds(points: np.ndarray, N: int | None = None) -> tuple[float, float]:
    """(lower, upper) on the diameter: a two-sweep lower bound, box and 2*eccentricity upper bounds."""
    pts = np.ascontiguousarray(points, dtype=np.int64)
    period = 0 if N is None else int(N)
    far, _ = _farthest(pts, 0, period)
    _, lo = _farthest(pts, far, period)
    ecc = _farthest(pts, 0, period)[1]
    box = sum(_extent(pts[:, a], N) ** 2 for a in range(pts.shape[1]))
    return math.sqrt(lo), min(math.sqrt(box), 2.0 * math.sqrt(ecc))


def euclid_diameter(points: np.ndarray, N: int | None = None, threshold: float | None = None) -> float:
    """Max pairwise (torus-wrapped if ``N`` is given) Euclidean distance.

    Exact up to ``EXACT_LIMIT`` points.  Larger sets are first bracketed by
    :func:`diameter_bounds` and only scanned exactly when the bracket is open.
    With ``threshold`` the exact scan stops as soon as the threshold is
    reached, so the result is then only guaranteed to be >= threshold.
    """
    pts = np.ascontiguousarray(points, dtype=np.int64)
    if len(pts) < 2:
        return 0.0
    period = 0 if N is None else int(N)
    stop = 0 if threshold is None else int(math.ceil(threshold * threshold - 1e-9))
    if len(pts) > EXACT_LIMIT:
        lo, hi = diameter_bounds(pts, N)
        if hi - lo < 1e-12:
            return lo
        if threshold is not None and (lo >= threshold or hi < threshold):
            return lo
    return math.sqrt(_exact_sq_diameter(pts, period, stop))


# ---------------------------------------------------------------- eta-hat


@dataclass(eq=False)
class EtaEstimate:
    d: int
    N: int
    u_grid: np.ndarray
    seed: int
    hits: np.ndarray  # (replicas, len(u_grid)) indicator of diam >= N/4
    largest: np.ndarray  # (replicas, len(u_grid)) largest vacant component size

    @property
    def replicas(self) -> int:
        return self.hits.shape[0]

    @property
    def eta(self) -> np.ndarray:
        return self.hits.mean(axis=0)

    @property
    def stderr(self) -> np.ndarray:
        p = self.eta
        return np.sqrt(p * (1 - p) / max(self.replicas, 1))

    @property
    def mean_largest(self) -> np.ndarray:
        return self.largest.mean(axis=0)

    def pathwise_monotone(self) -> bool:
        return bool(np.all(np.diff(self.hits.astype(np.int8), axis=1) <= 0))

    def rows(self) -> list[dict]:
        return [
            {"d": self.d, "N": self.N, "u": float(u), "replicas": self.replicas, "etaHat": float(e),
             "stderr": float(s), "meanLargestComponent": float(m), "seed": self.seed}
            for u, e, s, m in zip(self.u_grid, self.eta, self.stderr, self.mean_largest)
        ]


def first_visit_times(d: int, N: int, n_steps: int, rng: np.random.Generator) -> np.ndarray:
    """First hitting time of every site by a walk X_0..X_n_steps from a uniform start (-1 if never)."""
    nbrs = neighbor_table(d, N)
    first = np.full(N**d, -1, dtype=np.int64)
    pos = int(rng.integers(N**d))
    done = 0
    while done < n_steps:
        m = min(_walk.CHUNK, n_steps - done)
        pos = _walk._torus_first_visits(nbrs, pos, done, _walk.random_dirs(rng, m, d), first)
        done += m
    if first[pos] < 0:
        first[pos] = n_steps
    return first


def vacant_at(first: np.ndarray, u: float, volume: int) -> np.ndarray:
    """Vacant indicator at level u; the trace at u = 0 is empty."""
    if u <= 0:
        return np.ones(first.shape, dtype=bool)
    t = math.floor(u * volume)
    return (first < 0) | (first > t)


def _replica(d: int, N: int, u_grid: np.ndarray, seed: int, r: int):
    volume = N**d
    first = first_visit_times(d, N, math.floor(u_grid[-1] * volume), stream(seed, 4, r))
    hits = np.zeros(len(u_grid), dtype=bool)
    largest = np.zeros(len(u_grid), dtype=np.int64)
    coords = torus_coords((N,) * d)
    for j, u in enumerate(u_grid):
        stats = components(vacant_at(first, u, volume).reshape((N,) * d), "torus")
        largest[j] = stats.largest_component_size
        comp = stats.component_of(0)
        if comp >= 0:
            hits[j] = euclid_diameter(coords[stats.members(comp)], N, threshold=N / 4) >= N / 4
    return hits, largest


def eta_hat(d: int, N: int, u_grid, replicas: int, seed: int, threads: int = 1) -> EtaEstimate:
    """Estimate eta_N(u) = P[diam C_N(u) >= N/4] on an ascending u-grid."""
    grid = np.asarray(sorted(float(u) for u in u_grid))
    if np.any(grid < 0):
        raise ValueError("u must be >= 0")
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            out = list(pool.map(lambda r: _replica(d, N, grid, seed, r), range(replicas)))
    else:
        out = [_replica(d, N, grid, seed, r) for r in range(replicas)]
    hits = np.array([o[0] for o in out], dtype=bool).reshape(replicas, len(grid))
    largest = np.array([o[1] for o in out], dtype=np.int64).reshape(replicas, len(grid))
    return EtaEstimate(d, N, grid, seed, hits, largest)


def half_crossing(u_grid, eta) -> float:
    """First u where eta drops to 1/2, linearly interpolated; nan if it never does."""
    u = np.asarray(u_grid, dtype=float)
    e = np.asarray(eta, dtype=float)
    below = np.flatnonzero(e <= 0.5)
    if len(below) == 0:
        return float("nan")
    j = below[0]
    if j == 0:
        return float(u[0])
    return float(u[j - 1] + (e[j - 1] - 0.5) * (u[j] - u[j - 1]) / (e[j - 1] - e[j]))


def write_eta_csv(estimates, fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\r\n")
    writer.writeheader()
    for est in estimates:
        for row in est.rows():
            writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
