"""Geometry of the discrete torus: the rounded box B_N and the buffer set Delta_N.

Sites of the torus (Z/NZ)^d are identified with {0, ..., N-1}^d and carry a
flat C-order index, which is what every other module uses to refer to them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyDelta, GeometryInfeasible


@dataclass(frozen=True)
class Geometry:
    d: int
    N: int
    gamma: float
    chi: float

    @property
    def L(self) -> float:
        return 2.0 * self.N**self.gamma + self.chi * self.N

    @property
    def buffer_width(self) -> float:
        """Width N^gamma of the security zone between B and Delta."""
        return float(self.N**self.gamma)

    @property
    def radius(self) -> float:
        """Radius chi*N of the balls making up the rounded box."""
        return self.chi * self.N

    @property
    def kappa(self) -> float:
        return self.gamma * (self.d - 1) - 1.0

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d

    @property
    def volume(self) -> int:
        return self.N**self.d

    def center_range(self) -> tuple[int, int]:
        """Integer range [lo, hi] of [L, N-L] intersected with Z."""
        return math.ceil(self.L), math.floor(self.N - self.L)


def build_geometry(d: int, N: int, gamma: float, chi: float) -> Geometry:
    if d < 3:
        raise GeometryInfeasible(f"dimension d={d} must be at least 3")
    if N < 2:
        raise GeometryInfeasible(f"side length N={N} must be at least 2")
    if not 1.0 / (d - 1) < gamma < 1.0:
        raise GeometryInfeasible(f"gamma={gamma} outside (1/(d-1), 1) = ({1.0 / (d - 1):.4g}, 1)")
    if not 0.0 < chi < 0.25:
        raise GeometryInfeasible(f"chi={chi} outside (0, 1/4)")
    geom = Geometry(d, N, float(gamma), float(chi))
    if 2.0 * geom.L > N:
        raise GeometryInfeasible(f"2L = {2 * geom.L:.4f} exceeds N = {N} (gamma={gamma}, chi={chi})")
    lo, hi = geom.center_range()
    if lo > hi:
        raise GeometryInfeasible(f"[L, N-L] = [{geom.L:.4f}, {N - geom.L:.4f}] contains no integer")
    return geom


def min_feasible_N(d: int, gamma: float, chi: float, n_max: int = 10_000) -> int:
    """Smallest N accepted by :func:`build_geometry` for the given exponents."""
    for N in range(2, n_max + 1):
        try:
            build_geometry(d, N, gamma, chi)
        except GeometryInfeasible:
            continue
        return N
    raise GeometryInfeasible(f"no feasible N <= {n_max} for d={d}, gamma={gamma}, chi={chi}")


def torus_coords(shape: tuple[int, ...]) -> np.ndarray:
    """Coordinates of all sites, shape (N^d, d), in flat-index order."""
    grids = np.indices(shape).reshape(len(shape), -1).T
    return np.ascontiguousarray(grids, dtype=np.int64)


def neighbor_table(d: int, N: int) -> np.ndarray:
    """(N^d, 2d) flat indices of the torus neighbours; column 2i is +e_i, 2i+1 is -e_i."""
    idx = np.arange(N**d, dtype=np.int64).reshape((N,) * d)
    cols = []
    for axis in range(d):
        cols.append(np.roll(idx, -1, axis=axis).ravel())
        cols.append(np.roll(idx, 1, axis=axis).ravel())
    return np.ascontiguousarray(np.stack(cols, axis=1))


def wrapped_sq_dist(a: np.ndarray, b: np.ndarray, N: int | None) -> np.ndarray:
    """Integer squared Euclidean distance, torus-wrapped when N is given."""
    diff = np.abs(np.asarray(a, dtype=np.int64) - np.asarray(b, dtype=np.int64))
    if N is not None:
        diff = np.minimum(diff, N - diff)
    return (diff * diff).sum(axis=-1)


@dataclass(frozen=True, eq=False)
class LatticeSet:
    """A subset of the torus {0..N-1}^d stored as a dense boolean mask."""

    mask: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def d(self) -> int:
        return self.mask.ndim

    @property
    def N(self) -> int:
        return self.mask.shape[0]

    def __len__(self) -> int:
        return int(self.mask.sum())

    def __contains__(self, point) -> bool:
        p = tuple(int(c) % self.N for c in point)
        return bool(self.mask[p])

    @cached_property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask.ravel())

    @cached_property
    def points(self) -> np.ndarray:
        return np.stack(np.unravel_index(self.indices, self.mask.shape), axis=1).astype(np.int64)

    @cached_property
    def inner_boundary(self) -> np.ndarray:
        """Sorted flat indices of x in K having a nearest neighbour outside K."""
        m = self.mask
        outside_nb = np.zeros_like(m)
        for axis in range(m.ndim):
            outside_nb |= ~np.roll(m, 1, axis=axis)
            outside_nb |= ~np.roll(m, -1, axis=axis)
        return np.flatnonzero((m & outside_nb).ravel())

    @cached_property
    def boundary_points(self) -> np.ndarray:
        return np.stack(np.unravel_index(self.inner_boundary, self.mask.shape), axis=1).astype(np.int64)

    def complement(self) -> "LatticeSet":
        return LatticeSet(~self.mask)


def rounded_box(geom: Geometry) -> LatticeSet:
    """Union of closed Euclidean balls of radius chi*N centred on [L, N-L]^d cap Z^d."""
    lo, hi = geom.center_range()
    coords = np.indices(geom.shape)
    # distance to the integer cube of centres is separable per axis
    sq = np.zeros(geom.shape, dtype=np.int64)
    for axis in range(geom.d):
        c = coords[axis]
        off = c - np.clip(c, lo, hi)
        sq += off * off
    return LatticeSet(sq <= geom.radius**2)


def delta_set(geom: Geometry, box: LatticeSet) -> LatticeSet:
    """Sites whose torus distance to the box exceeds N^gamma."""
    pts = box.points
    all_pts = torus_coords(geom.shape)
    tree = cKDTree(pts, boxsize=geom.N)
    _, nearest = tree.query(all_pts, k=1)
    sq = wrapped_sq_dist(all_pts, pts[nearest], geom.N)
    mask = (sq > geom.buffer_width**2).reshape(geom.shape)
    if not mask.any():
        raise EmptyDelta(f"Delta is empty for {geom}")
    return LatticeSet(mask)


@dataclass(frozen=True, eq=False)
class Domain:
    """Everything derived from a geometry that the other modules share."""

    geom: Geometry
    box: LatticeSet
    delta: LatticeSet

    @cached_property
    def neighbors(self) -> np.ndarray:
        return neighbor_table(self.geom.d, self.geom.N)

    @property
    def dB(self) -> np.ndarray:
        return self.box.inner_boundary

    @property
    def dDelta(self) -> np.ndarray:
        return self.delta.inner_boundary

    def coords(self, flat: np.ndarray) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(flat), self.geom.shape), axis=1).astype(np.int64)


def build_domain(d: int, N: int, gamma: float, chi: float) -> Domain:
    geom = build_geometry(d, N, gamma, chi)
    box = rounded_box(geom)
    return Domain(geom, box, delta_set(geom, box))
