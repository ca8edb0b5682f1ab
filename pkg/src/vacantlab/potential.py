"""Discrete potential theory on Z^d and on the torus.

Three independent routes are available and are cross-checked in the tests:

* Dirichlet / Poisson solves on finite domains (``exact_harmonic_solve``),
  used with kill-ball truncation and extrapolation in 1/R for Z^d quantities;
* Green-function formulas: the Z^d Green function from the integral
  g(x) = int_0^inf e^{-t} prod_i I_{x_i}(t/d) dt, and the torus
  pseudo-Green function obtained by FFT.  Hitting distributions of a finite
  set K then come from a dense solve on K;
* Monte Carlo walks (module :mod:`vacantlab.walk`).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl
from scipy.special import ive

from .errors import EmptySet, SolverDiverged, TooLarge
from .lattice import Domain, wrapped_sq_dist
from .rng import as_generator
from . import walk as _walk

MAX_UNKNOWNS = 5_000_000
DIRECT_LIMIT = 20_000
RESIDUAL_TOL = 1e-10


@dataclass
class EquilibriumMeasure:
    support: np.ndarray  # (k, d) points, or flat torus indices
    weights: np.ndarray
    stderr: np.ndarray | None = None
    method: str = "green"

    @property
    def total(self) -> float:
        return float(self.weights.sum())

    @property
    def normalized(self) -> np.ndarray:
        return self.weights / self.weights.sum()


@dataclass
class HittingKernel:
    """Rows: source points; columns: target boundary points."""

    sources: np.ndarray
    targets: np.ndarray
    matrix: np.ndarray
    lattice: str
    stderr: np.ndarray | None = None
    method: str = "exact"

    @property
    def row_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=1)


# ---------------------------------------------------------------- sparse solver


def exact_harmonic_solve(free: np.ndarray, nbrs: np.ndarray, boundary, source=None,
                         max_unknowns: int = MAX_UNKNOWNS) -> np.ndarray:
    """Solve v = P v + source on ``free`` sites with v = boundary elsewhere.

    ``nbrs`` is an (n, deg) neighbour table (entries -1 are ignored, which is
    only legal for non-free sites); P is the uniform nearest-neighbour
    kernel.  ``boundary`` has shape (n,) or (n, k); its values on free
    sites are ignored.  Returns the full value array.
    """
    free = np.asarray(free, dtype=bool).ravel()
    n, deg = nbrs.shape
    bnd = np.asarray(boundary, dtype=float)
    squeeze = bnd.ndim == 1
    bnd = bnd.reshape(n, -1)
    fi = np.flatnonzero(free)
    m = fi.size
    if m > max_unknowns:
        raise TooLarge(f"{m} unknowns exceed the limit {max_unknowns}")
    out = bnd.copy()
    out[fi] = 0.0
    if m == 0:
        return out[:, 0] if squeeze else out
    nb = nbrs[fi]
    if (nb < 0).any():
        raise ValueError("a free site has a missing neighbour")
    pos = np.full(n, -1, dtype=np.int64)
    pos[fi] = np.arange(m)
    col = pos[nb.ravel()]
    row = np.repeat(np.arange(m), deg)
    inner = col >= 0
    P_ff = sp.csr_matrix((np.full(inner.sum(), 1.0 / deg), (row[inner], col[inner])), shape=(m, m))
    A = (sp.identity(m, format="csr") - P_ff).tocsr()
    # boundary contribution: mean of absorbing neighbours' values
    nbv = np.where(inner.reshape(m, deg)[..., None], 0.0, out[nb.ravel()].reshape(m, deg, -1))
    rhs = nbv.sum(axis=1) / deg
    if source is not None:
        rhs = rhs + np.asarray(source, dtype=float).reshape(n, -1)[fi]
    if m <= DIRECT_LIMIT:
        sol = spl.splu(A.tocsc()).solve(rhs)
        if sol.ndim == 1:
            sol = sol[:, None]
    else:
        sol = np.empty_like(rhs)
        for j in range(rhs.shape[1]):
            sol[:, j] = _cg(A, rhs[:, j])
    res = np.abs(A @ sol - rhs).max()
    if not np.isfinite(res) or res > RESIDUAL_TOL:
        raise SolverDiverged(f"residual {res:.3e} above {RESIDUAL_TOL}")
    out[fi] = sol
    return out[:, 0] if squeeze else out


def _cg(A, b):
    x = np.zeros_like(b)
    tol = 1e-2 * RESIDUAL_TOL / max(np.abs(b).max(), 1e-300)
    for _ in range(5):
        x, info = spl.cg(A, b, x0=x, rtol=tol, atol=0.0, maxiter=20_000)
        if np.abs(A @ x - b).max() <= 0.5 * RESIDUAL_TOL:
            break
    return x


# ---------------------------------------------------------------- Z^d boxes


def ball_region(center, radius: float, pad: int = 1):
    """Cube of Z^d sites around ``center`` holding the open ball |x - c| < radius.

    Returns (coords (n, d), nbrs (n, 2d) with -1 off the cube, inside mask).
    """
    center = np.asarray(center, dtype=np.int64)
    d = center.size
    r = int(math.ceil(radius)) + pad
    side = 2 * r + 1
    shape = (side,) * d
    coords = np.indices(shape).reshape(d, -1).T - r + center
    idx = np.arange(side**d).reshape(shape)
    cols = []
    for axis in range(d):
        for shift in (-1, 1):
            nb = np.roll(idx, shift, axis=axis)
            edge = [slice(None)] * d
            edge[axis] = -1 if shift == -1 else 0
            nb = nb.copy()
            nb[tuple(edge)] = -1
            cols.append(nb.ravel())
    nbrs = np.stack(cols, axis=1)
    # column 2a is +e_a and 2a+1 is -e_a, as in lattice.neighbor_table
    inside = ((coords - center) ** 2).sum(axis=1) < radius**2
    return coords, nbrs, inside


def _index_of(coords: np.ndarray, points: np.ndarray, center, radius: float) -> np.ndarray:
    r = int(math.ceil(radius)) + 1
    side = 2 * r + 1
    rel = np.asarray(points, dtype=np.int64) - np.asarray(center, dtype=np.int64) + r
    if (rel < 0).any() or (rel >= side).any():
        raise ValueError("point outside the solve region")
    return np.ravel_multi_index(tuple(rel.T), (side,) * rel.shape[1])


def killed_hitting(K: np.ndarray, sources: np.ndarray, radius: float, center=None) -> tuple[np.ndarray, np.ndarray]:
    """Exact P_x[H_K < tau_R, X_{H_K} = y] on the ball |x - c| < R.

    Returns (matrix sources x K, escape-before-return probabilities for K's
    own sites e_R(x) = P_x[tilde H_K > tau_R]).
    """
    K = np.asarray(K, dtype=np.int64).reshape(-1, np.asarray(K).shape[-1])
    if center is None:
        center = np.round(K.mean(axis=0)).astype(np.int64)
    coords, nbrs, inside = ball_region(center, radius)
    kidx = _index_of(coords, K, center, radius)
    if not inside[kidx].all():
        raise ValueError("K must lie inside the kill ball")
    free = inside.copy()
    free[kidx] = False
    bnd = np.zeros((coords.shape[0], len(kidx)))
    bnd[kidx, np.arange(len(kidx))] = 1.0
    val = exact_harmonic_solve(free, nbrs, bnd)
    src = _index_of(coords, sources, center, radius)
    hit = val[src]
    # escape from K's own sites: one step then no return before the sphere
    nb = nbrs[kidx]
    ret = val[nb].sum(axis=2).mean(axis=1)
    return hit, 1.0 - ret


def killed_escape(K: np.ndarray, radius: float, center=None) -> np.ndarray:
    """e_R(x) = P_x[tilde H_K > tau_R] for x in K, from a single Dirichlet solve."""
    K = np.asarray(K, dtype=np.int64).reshape(-1, np.asarray(K).shape[-1])
    if center is None:
        center = np.round(K.mean(axis=0)).astype(np.int64)
    coords, nbrs, inside = ball_region(center, radius)
    kidx = _index_of(coords, K, center, radius)
    if not inside[kidx].all():
        raise ValueError("K must lie inside the kill ball")
    free = inside.copy()
    free[kidx] = False
    bnd = np.zeros(coords.shape[0])
    bnd[kidx] = 1.0
    val = exact_harmonic_solve(free, nbrs, bnd)
    return 1.0 - val[nbrs[kidx]].mean(axis=1)


def richardson(radii, values) -> tuple[np.ndarray, np.ndarray]:
    """Polynomial extrapolation to 1/R = 0 through all radii.

    Returns (extrapolated value, error estimate = difference to the
    extrapolation using one radius fewer).
    """
    radii = np.asarray(radii, dtype=float)
    vals = np.asarray(values, dtype=float)
    x = 1.0 / radii

    def extrap(xs, ys):
        V = np.vander(xs, len(xs))
        coef = np.linalg.solve(V, ys.reshape(len(xs), -1))
        return coef[-1]

    full = extrap(x, vals)
    if len(radii) > 1:
        err = np.abs(full - extrap(x[1:], vals[1:]))
    else:
        err = np.full_like(full, np.nan)
    shape = vals.shape[1:]
    return full.reshape(shape), err.reshape(shape)


# ---------------------------------------------------------------- Z^d Green function


@lru_cache(maxsize=8)
def _green_table(d: int, M: int) -> np.ndarray:
    h = 0.02
    s = np.arange(-36.0, 19.0 + h / 2, h)
    t = np.exp(s)
    w = h * t
    w[0] *= 0.5
    w[-1] *= 0.5
    k = np.arange(M + 1)
    I = ive(k[:, None], t[None, :] / d)  # e^{-t/d} I_k(t/d)
    # product over d axes, contracted over the quadrature nodes in blocks
    table = np.zeros((M + 1,) * d)
    for lo in range(0, s.size, 400):
        blk = slice(lo, lo + 400)
        acc = I[:, blk] * w[blk]
        for _ in range(d - 1):
            acc = acc[..., None, :] * I[(None,) * (acc.ndim - 1) + (slice(None), blk)]
        table += acc.sum(axis=-1)
    T = t[-1]
    tail = (d / (2 * math.pi)) ** (d / 2) * T ** (1 - d / 2) / (d / 2 - 1)
    table += tail
    return table


def zd_green(offsets, d: int | None = None) -> np.ndarray:
    """Z^d Green function g(x) = sum_n P_0[X_n = x] at integer offsets."""
    off = np.abs(np.asarray(offsets, dtype=np.int64))
    d = off.shape[-1] if d is None else d
    if d < 3:
        raise ValueError("the Green function is finite only for d >= 3")
    M = int(off.max()) if off.size else 0
    M = max(8, 1 << int(math.ceil(math.log2(M + 1))))
    table = _green_table(d, M)
    return table[tuple(off.reshape(-1, d).T)].reshape(off.shape[:-1])


def _pairwise_offsets(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    return X[:, None, :] - Y[None, :, :]


class ZdSet:
    """Potential theory of a finite K in Z^d through its Green matrix.

    Hitting K from outside is the same as hitting its inner boundary, so
    only the boundary enters the linear algebra.
    """

    def __init__(self, points: np.ndarray, boundary: np.ndarray | None = None):
        pts = np.asarray(points, dtype=np.int64)
        if pts.size == 0:
            raise EmptySet("K is empty")
        self.points = pts.reshape(-1, pts.shape[-1])
        self.d = self.points.shape[1]
        self.boundary = self.points if boundary is None else np.asarray(boundary, dtype=np.int64)
        G = zd_green(_pairwise_offsets(self.boundary, self.boundary), self.d)
        self._lu = np.linalg.inv(G)
        self.eq = self._lu.sum(axis=1)  # G e = 1, G symmetric

    @property
    def capacity(self) -> float:
        return float(self.eq.sum())

    @property
    def normalized_eq(self) -> np.ndarray:
        return self.eq / self.eq.sum()

    def green_rows(self, x: np.ndarray) -> np.ndarray:
        return zd_green(_pairwise_offsets(np.asarray(x, dtype=np.int64).reshape(-1, self.d), self.boundary), self.d)

    def hitting(self, x: np.ndarray) -> np.ndarray:
        """P_x[H_K < inf, X_{H_K} = y] for sources x outside K, columns = boundary."""
        return self.green_rows(x) @ self._lu

    def escape(self, x: np.ndarray) -> np.ndarray:
        """P_x[H_K = inf] for x outside K."""
        return 1.0 - self.green_rows(x) @ self.eq


def green_function(x, y, kill_radius: float | None = None, method: str = "bessel",
                   radii_factors=(1, 2, 4)) -> float:
    """g(x, y): expected number of visits to y of the Z^d walk from x."""
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if method == "bessel":
        return float(zd_green(x - y))
    if method != "killball":
        raise ValueError(f"unknown method {method!r}")
    R0 = kill_radius or max(10.0, 4.0 * math.sqrt(((x - y) ** 2).sum()) + 4)
    radii = [R0 * f for f in radii_factors]
    vals = []
    for R in radii:
        coords, nbrs, inside = ball_region(y, R)
        src = np.zeros(coords.shape[0])
        src[_index_of(coords, y[None], y, R)] = 1.0
        v = exact_harmonic_solve(inside, nbrs, np.zeros(coords.shape[0]), source=src)
        vals.append(v[_index_of(coords, x[None], y, R)][0])
    est, _ = richardson(radii, vals)
    return float(est)


def capacity(K, mode: str = "green", kill_radius: float | None = None, samples: int = 20_000,
             rng=None, radii_factors=(1, 2, 4)) -> EquilibriumMeasure:
    """Equilibrium measure e_K(x) = P_x[tilde H_K = inf] of a finite K in Z^d.

    mode ``green`` uses the Green matrix; ``exact`` solves Dirichlet problems
    on kill balls of radii R * radii_factors and extrapolates in 1/R; ``mc``
    simulates escapes at radii R and 2R and extrapolates linearly.
    """
    K = np.asarray(K, dtype=np.int64)
    if K.size == 0:
        raise EmptySet("K is empty")
    K = K.reshape(-1, K.shape[-1])
    d = K.shape[1]
    if mode == "green":
        zs = ZdSet(K)
        return EquilibriumMeasure(K, zs.eq.copy(), np.zeros(len(K)), "green")
    span = math.sqrt(((K - K.mean(axis=0)) ** 2).sum(axis=1).max())
    R0 = kill_radius or max(25.0, 5.0 * span)
    center = np.round(K.mean(axis=0)).astype(np.int64)
    if mode == "exact":
        radii = [R0 * f for f in radii_factors]
        escs = [killed_escape(K, R, center) for R in radii]
        est, err = richardson(radii, np.array(escs))
        return EquilibriumMeasure(K, est, err, "exact")
    if mode == "mc":
        rng = as_generator(rng)
        kmin = K.min(axis=0)
        kmask = np.zeros(tuple(K.max(axis=0) - kmin + 1), dtype=bool)
        kmask[tuple((K - kmin).T)] = True
        est = np.empty(len(K))
        se = np.empty(len(K))
        for i, x in enumerate(K):
            ps = []
            for R in (R0, 2 * R0):
                esc = 0
                for _ in range(samples):
                    status, _ = _walk.zd_run_until(x, kmask, kmin, center, R, rng, skip_first=True)
                    esc += status == 2
                ps.append(esc / samples)
            est[i] = 2 * ps[1] - ps[0]
            se[i] = math.sqrt((4 * ps[1] * (1 - ps[1]) + ps[0] * (1 - ps[0])) / samples)
        return EquilibriumMeasure(K, est, se, "mc")
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------- torus


@lru_cache(maxsize=8)
def torus_green(d: int, N: int) -> np.ndarray:
    """Zero-mean torus Green function G with (I - P) G = delta_0 - N^{-d}, shape (N,)*d."""
    k = 2 * np.pi * np.fft.fftfreq(N)
    phi = np.zeros((N,) * d)
    for axis in range(d):
        sh = [1] * d
        sh[axis] = N
        phi = phi + np.cos(k).reshape(sh)
    phi /= d
    with np.errstate(divide="ignore"):
        Ghat = 1.0 / (1.0 - phi)
    Ghat[(0,) * d] = 0.0
    G = np.fft.ifftn(Ghat).real
    G.setflags(write=False)
    return G


class TorusSet:
    """Hitting distribution of K on the torus via the pseudo-Green function.

    h_y(x) = sum_z G(x - z) a_z + c with sum_z a_z = 0 is harmonic off K; the
    coefficients are fixed by h_y = 1{y} on the boundary of K.
    """

    def __init__(self, d: int, N: int, boundary_flat: np.ndarray):
        self.d, self.N = d, N
        self.boundary = np.asarray(boundary_flat, dtype=np.int64)
        self.G = torus_green(d, N)
        k = self.boundary.size
        Gk = self._gather(self.boundary)
        A = np.zeros((k + 1, k + 1))
        A[:k, :k] = Gk
        A[:k, k] = 1.0
        A[k, :k] = 1.0
        rhs = np.zeros((k + 1, k))
        rhs[:k] = np.eye(k)
        sol = np.linalg.solve(A, rhs)
        self.a = sol[:k]
        self.c = sol[k]

    def _gather(self, x_flat: np.ndarray) -> np.ndarray:
        shape = (self.N,) * self.d
        xc = np.stack(np.unravel_index(np.asarray(x_flat), shape), axis=1)
        zc = np.stack(np.unravel_index(self.boundary, shape), axis=1)
        diff = (xc[:, None, :] - zc[None, :, :]) % self.N
        return self.G[tuple(np.moveaxis(diff, -1, 0))]

    def hitting(self, x_flat: np.ndarray) -> np.ndarray:
        """P_x[X_{H_K} = y] for x outside K (rows) and y on the boundary (cols)."""
        return self._gather(x_flat) @ self.a + self.c

    def harmonic_table(self) -> np.ndarray:
        """(|boundary|, N^d) array of x -> P_x[X_{H_K} = y], valid off the interior of K."""
        shape = (self.N,) * self.d
        Gf = np.fft.rfftn(self.G)
        out = np.empty((self.boundary.size, self.N**self.d))
        for j in range(self.boundary.size):
            field = np.zeros(self.N**self.d)
            field[self.boundary] = self.a[:, j]
            h = np.fft.irfftn(Gf * np.fft.rfftn(field.reshape(shape)), s=shape, axes=tuple(range(self.d))).ravel()
            out[j] = h + self.c[j]
        return out


def torus_hitting_kernel(domain: Domain, sources: np.ndarray) -> HittingKernel:
    ts = TorusSet(domain.geom.d, domain.geom.N, domain.dB)
    return HittingKernel(np.asarray(sources), domain.dB, ts.hitting(sources), "torus")


def zd_hitting_kernel(domain: Domain, sources: np.ndarray) -> tuple[HittingKernel, np.ndarray, ZdSet]:
    """Z^d hitting distribution of B from ``sources`` plus P_x[H_B = inf]."""
    zs = ZdSet(domain.box.points, domain.box.boundary_points)
    src = domain.coords(sources)
    return HittingKernel(np.asarray(sources), domain.dB, zs.hitting(src), "zd"), zs.escape(src), zs


def hitting_kernel(domain: Domain, sources=None, lattice: str = "torus", mode: str = "exact",
                   samples: int = 2000, rng=None, kill_radius: float | None = None) -> HittingKernel:
    """Rows P_x[X_{H_B} = y], x in ``sources`` (default boundary of Delta), y on the boundary of B."""
    sources = domain.dDelta if sources is None else np.asarray(sources)
    if lattice not in ("torus", "zd"):
        raise ValueError(f"unknown lattice {lattice!r}")
    if mode == "exact":
        if lattice == "torus":
            return torus_hitting_kernel(domain, sources)
        return zd_hitting_kernel(domain, sources)[0]
    if mode != "mc":
        raise ValueError(f"unknown mode {mode!r}")
    rng = as_generator(rng)
    col = {int(y): j for j, y in enumerate(domain.dB)}
    counts = np.zeros((len(sources), len(domain.dB)))
    if lattice == "torus":
        target = domain.box.mask.ravel()
        for i, x in enumerate(sources):
            for _ in range(samples):
                st = _walk.WalkState(int(x), 0, rng)
                hit, _ = _walk.run_until_hit(st, target, domain.neighbors, 10**9)
                counts[i, col[hit]] += 1
    else:
        R = kill_radius or max(5.0 * domain.geom.N, domain.geom.N ** 1.5)
        center = np.full(domain.geom.d, (domain.geom.N - 1) / 2)
        kmask = domain.box.mask
        for i, x in enumerate(domain.coords(sources)):
            for _ in range(samples):
                status, pos = _walk.zd_run_until(x, kmask, np.zeros(domain.geom.d), center, R, rng)
                if status == 1:
                    counts[i, col[int(np.ravel_multi_index(tuple(pos), domain.geom.shape))]] += 1
    p = counts / samples
    return HittingKernel(sources, domain.dB, p, lattice, np.sqrt(p * (1 - p) / samples), "mc")


# ---------------------------------------------------------------- B versus Delta


class InnerRegion:
    """Walk killed on Delta: exit distributions from U = T \\ Delta.

    One sparse LU factorisation of (I - P) on U serves every quantity.
    """

    def __init__(self, domain: Domain):
        self.domain = domain
        n = domain.geom.volume
        nbrs = domain.neighbors
        free = ~domain.delta.mask.ravel()
        self.U = np.flatnonzero(free)
        m = self.U.size
        self.pos = np.full(n, -1, dtype=np.int64)
        self.pos[self.U] = np.arange(m)
        deg = nbrs.shape[1]
        col = self.pos[nbrs[self.U].ravel()]
        row = np.repeat(np.arange(m), deg)
        inner = col >= 0
        P = sp.csr_matrix((np.full(inner.sum(), 1.0 / deg), (row[inner], col[inner])), shape=(m, m))
        self.A = (sp.identity(m, format="csr") - P).tocsc()
        self.lu = spl.splu(self.A)
        # adjacency from U to the boundary of Delta
        exit_cols = {int(y): j for j, y in enumerate(domain.dDelta)}
        r, c = [], []
        for i, x in enumerate(self.U):
            for y in nbrs[x]:
                j = exit_cols.get(int(y))
                if j is not None:
                    r.append(i)
                    c.append(j)
        self.to_exit = sp.csr_matrix((np.full(len(r), 1.0 / deg), (r, c)), shape=(m, len(exit_cols)))

    def _solve(self, rhs: np.ndarray) -> np.ndarray:
        sol = self.lu.solve(rhs)
        res = np.abs(self.A @ sol - rhs).max()
        if res > RESIDUAL_TOL:
            raise SolverDiverged(f"residual {res:.3e}")
        return sol

    def exit_distribution(self, sources: np.ndarray, block: int = 256) -> np.ndarray:
        """P_x[X_{H_Delta} = y] for x in ``sources`` (inside U), y on the boundary of Delta.

        Uses symmetry of the killed Green function: one solve per source.
        """
        src = self.pos[np.asarray(sources)]
        if (src < 0).any():
            raise ValueError("sources must lie outside Delta")
        out = np.empty((src.size, self.to_exit.shape[1]))
        m = self.U.size
        for lo in range(0, src.size, block):
            s = src[lo:lo + block]
            rhs = np.zeros((m, s.size))
            rhs[s, np.arange(s.size)] = 1.0
            green = self._solve(rhs)
            out[lo:lo + block] = (self.to_exit.T @ green).T
        return out

    def harmonic_table(self, block: int = 256) -> np.ndarray:
        """(|boundary of Delta|, N^d) array of x -> P_x[X_{H_Delta} = y]."""
        k = self.to_exit.shape[1]
        n = self.domain.geom.volume
        out = np.zeros((k, n))
        out[np.arange(k), self.domain.dDelta] = 1.0
        for lo in range(0, k, block):
            rhs = self.to_exit[:, lo:lo + block].toarray()
            out[lo:lo + block, self.U] = self._solve(rhs).T
        return out

    def avoid_probability(self) -> np.ndarray:
        """P_x[tilde H_B > H_Delta] for x on the boundary of B."""
        dom = self.domain
        n = dom.geom.volume
        b = dom.box.mask.ravel()
        dmask = dom.delta.mask.ravel()
        free = ~(b | dmask)
        v = exact_harmonic_solve(free, dom.neighbors, dmask.astype(float))
        return v[dom.neighbors[dom.dB]].mean(axis=1)


def cap_delta(domain: Domain, mode: str = "exact", samples: int = 4000, rng=None) -> EquilibriumMeasure:
    """cap_Delta(B) = sum over the boundary of B of P_x[tilde H_B > H_Delta], with its measure."""
    if mode == "exact":
        b = domain.box.mask.ravel()
        dmask = domain.delta.mask.ravel()
        v = exact_harmonic_solve(~(b | dmask), domain.neighbors, dmask.astype(float))
        w = v[domain.neighbors[domain.dB]].mean(axis=1)
        return EquilibriumMeasure(domain.dB, w, np.zeros_like(w), "exact")
    if mode != "mc":
        raise ValueError(f"unknown mode {mode!r}")
    rng = as_generator(rng)
    target = domain.box.mask.ravel() | domain.delta.mask.ravel()
    dmask = domain.delta.mask.ravel()
    nbrs = domain.neighbors
    w = np.empty(len(domain.dB))
    for i, x in enumerate(domain.dB):
        wins = 0
        for _ in range(samples):
            st = _walk.WalkState(int(nbrs[x, rng.integers(nbrs.shape[1])]), 0, rng)
            hit, _ = _walk.run_until_hit(st, target, nbrs, 10**9)
            wins += bool(dmask[hit])
        w[i] = wins / samples
    return EquilibriumMeasure(domain.dB, w, np.sqrt(w * (1 - w) / samples), "mc")


def expected_hitting_time(domain_nbrs: np.ndarray, target: np.ndarray) -> np.ndarray:
    """E_x[H_K] for every site, by a Poisson solve (I - P) t = 1 off K."""
    n = domain_nbrs.shape[0]
    free = ~np.asarray(target, dtype=bool).ravel()
    return exact_harmonic_solve(free, domain_nbrs, np.zeros(n), source=np.ones(n))


# ---------------------------------------------------------------- tabulation


TABLE_FIELDS = ("set", "N", "quantity", "value", "stderr", "method")


def tabulate(domain: Domain, fh, mode: str = "exact") -> list[dict]:
    """Emit the main potential-theoretic quantities of (B, Delta) as CSV rows."""
    g = domain.geom
    desc = f"rounded_box(d={g.d};gamma={g.gamma};chi={g.chi})"
    rows = []

    def add(q, v, se, method):
        rows.append({"set": desc, "N": g.N, "quantity": q, "value": repr(float(v)),
                     "stderr": repr(float(se)), "method": method})

    cd = cap_delta(domain, mode="exact")
    add("cap_Delta(B)", cd.total, 0.0, "exact")
    add("cap_Delta(B)/N^(d-1-gamma)", cd.total / g.N ** (g.d - 1 - g.gamma), 0.0, "exact")
    eb = cd.normalized
    add("max/min ebar_Delta", eb.max() / eb.min(), 0.0, "exact")
    zs = ZdSet(domain.box.points, domain.box.boundary_points)
    add("cap(B)", zs.capacity, 0.0, "green")
    esc = zs.escape(domain.coords(domain.dDelta))
    add("min P_y[H_B=inf]*N^(1-gamma)", esc.min() * g.N ** (1 - g.gamma), 0.0, "green")
    H = torus_hitting_kernel(domain, domain.dDelta).matrix
    add("max torus P_x[X_HB=y]*N^(gamma(d-1))", H.max() * g.N ** (g.gamma * (g.d - 1)), 0.0, "exact")
    w = csv.DictWriter(fh, fieldnames=TABLE_FIELDS, lineterminator="\r\n")
    w.writeheader()
    w.writerows(rows)
    return rows
