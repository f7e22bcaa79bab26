"""Discretised martingale measure M0 on V = [0, 1] with intensity mu (x) dt.

V is cut into ``n_cells`` uniform cells.  On every time step each cell carries
an independent Gaussian increment with variance ``cell_mass * dt``, so that
``M0(A)`` is a Brownian motion with quadratic variation ``mu(A) t`` and
``M0(V)`` is a standard k-dimensional Brownian motion.

Random numbers come from Philox (a counter-based generator).  Every path owns
the stream ``key=(seed, channel), counter=(0, 0, path, 0)``, so results do not
depend on how paths are split across workers.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

# stream tags for Philox keys; different tags never share counters
BASE_CHANNEL = 0
L_CHANNEL = 1
Y0_CHANNEL = 2
VALIDATION_CHANNEL = 3

THREADS_ENV = "RELAXPA_THREADS"


@dataclass(frozen=True)
class IntensityGrid:
    cell_mass: np.ndarray
    cell_repr: np.ndarray

    @property
    def n_cells(self):
        return len(self.cell_mass)

    def mask(self, predicate):
        """Boolean cell mask from a predicate on the cell representatives."""
        return np.asarray(predicate(self.cell_repr), dtype=bool)

    def mass_of(self, mask):
        return float(np.sum(self.cell_mass[np.asarray(mask, dtype=bool)]))


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise InvalidArgumentError("n_steps must be >= 1")
        if not self.T > 0:
            raise InvalidArgumentError("T must be positive")

    @property
    def dt(self):
        return self.T / self.n_steps

    @property
    def times(self):
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.T
        return t

    def index(self, t):
        """Grid index of time ``t`` (must lie on the grid up to rounding)."""
        i = int(round(t / self.dt))
        if i < 0 or i > self.n_steps or abs(i * self.dt - t) > 1e-9 * max(1.0, self.T):
            raise InvalidArgumentError(f"time {t} is not on the grid")
        return i


@dataclass(frozen=True)
class BaseMeasurePaths:
    """Increments of M0, shape (n_paths, n_steps, n_cells, k)."""

    increments: np.ndarray
    grid: IntensityGrid
    tg: TimeGrid
    seed: int
    channel: int = BASE_CHANNEL

    @property
    def n_paths(self):
        return self.increments.shape[0]

    @property
    def k(self):
        return self.increments.shape[3]

    def set_increments(self, mask):
        """Increments of M0(A) for the cell subset ``mask``: (n, N, k)."""
        mask = np.asarray(mask, dtype=float)
        if mask.shape != (self.grid.n_cells,):
            raise InvalidArgumentError("cell mask does not match the grid")
        return np.sum(self.increments * mask[None, None, :, None], axis=2)

    def brownian_increments(self):
        """Increments of W0 = M0(V): (n, N, k)."""
        return self.set_increments(np.ones(self.grid.n_cells))

    def brownian_path(self):
        w = np.zeros((self.n_paths, self.tg.n_steps + 1, self.k))
        np.cumsum(self.brownian_increments(), axis=1, out=w[:, 1:])
        return w


@dataclass(frozen=True)
class RelaxedControlPath:
    """Push-forward of mu under a cell-wise map, per (path, step).

    Atoms are stored padded: ``points[p, i, :counts[p, i]]`` with matching
    ``weights``; padding has weight 0 and NaN points.
    """

    points: np.ndarray
    weights: np.ndarray
    counts: np.ndarray = field(repr=False)

    def atoms(self, p, i):
        c = self.counts[p, i]
        return self.points[p, i, :c], self.weights[p, i, :c]

    def integrate(self, g):
        """sum_g g(u_g) w_g per (path, step) for a vectorised ``g``."""
        pts = np.where(self.weights > 0, self.points, 0.0) if self.points.ndim == 3 else self.points
        vals = np.asarray(g(pts), dtype=float)
        return np.sum(np.where(self.weights > 0, vals * self.weights, 0.0), axis=2)


def build_intensity_grid(n_cells):
    if int(n_cells) != n_cells or n_cells < 1:
        raise InvalidArgumentError(f"n_cells must be a positive integer, got {n_cells!r}")
    n_cells = int(n_cells)
    mass = np.full(n_cells, 1.0 / n_cells)
    reprs = (np.arange(n_cells) + 0.5) / n_cells
    return IntensityGrid(cell_mass=mass, cell_repr=reprs)


def default_threads():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def path_normals(seed, channel, n_paths, shape, threads=None):
    """Standard normals of shape (n_paths, *shape), one Philox stream per path."""
    if seed < 0:
        raise InvalidArgumentError("seed must be non-negative")
    shape = tuple(int(s) for s in shape)
    out = np.empty((n_paths,) + shape)
    size = int(np.prod(shape))

    def fill(lo, hi):
        for p in range(lo, hi):
            bitgen = np.random.Philox(key=[int(seed), int(channel)], counter=[0, 0, p, 0])
            out[p] = np.random.Generator(bitgen).standard_normal(size).reshape(shape)

    threads = threads or default_threads()
    if threads <= 1 or n_paths < 2 * threads:
        fill(0, n_paths)
    else:
        bounds = np.linspace(0, n_paths, threads + 1).astype(int)
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(lambda b: fill(*b), zip(bounds[:-1], bounds[1:])))
    return out


def simulate_base_measure(grid, tg, k, n_paths, seed, threads=None, channel=BASE_CHANNEL):
    if k < 1 or n_paths < 1:
        raise InvalidArgumentError("k and n_paths must be >= 1")
    z = path_normals(seed, channel, n_paths, (tg.n_steps, grid.n_cells, k), threads)
    scale = np.sqrt(grid.cell_mass * tg.dt)
    z *= scale[None, None, :, None]
    return BaseMeasurePaths(increments=z, grid=grid, tg=tg, seed=int(seed), channel=channel)


def _check_leading(arr, paths):
    n, N, C, _ = paths.increments.shape
    if arr.shape[:3] != (n, N, C):
        raise InvalidArgumentError(
            f"field shape {arr.shape[:3]} does not match ensemble grid {(n, N, C)}"
        )


def integrate_stochastic(field, paths):
    """Cumulative int_0^t int_V field dM0 with left-point (Ito) evaluation.

    ``field`` is (n, N, C) when k == 1, (n, N, C, k) for a k-vector integrand
    (scalar result) or (n, N, C, d, k) for a matrix integrand (d-vector result).
    """
    field = np.asarray(field, dtype=float)
    dm = paths.increments
    if field.ndim == 3:
        if paths.k != 1:
            raise InvalidArgumentError("scalar field requires k == 1")
        field = field[..., None]
    _check_leading(field, paths)
    if field.ndim == 4:
        if field.shape[3] != paths.k:
            raise InvalidArgumentError("field noise dimension mismatch")
        step = np.sum(np.sum(field * dm, axis=3), axis=2)
        out = np.zeros((step.shape[0], step.shape[1] + 1))
    elif field.ndim == 5:
        if field.shape[4] != paths.k:
            raise InvalidArgumentError("field noise dimension mismatch")
        step = np.sum(np.einsum("npcdk,npck->npcd", field, dm), axis=2)
        out = np.zeros((step.shape[0], step.shape[1] + 1, step.shape[2]))
    else:
        raise InvalidArgumentError(f"unsupported field rank {field.ndim}")
    np.cumsum(step, axis=1, out=out[:, 1:])
    return out


def integrate_intensity(field, grid, tg):
    """Cumulative int_0^t int_V g dm0 for a scalar field (n, N, C)."""
    field = np.asarray(field, dtype=float)
    if field.ndim != 3 or field.shape[1:] != (tg.n_steps, grid.n_cells):
        raise InvalidArgumentError(
            f"field shape {field.shape} does not match (n, {tg.n_steps}, {grid.n_cells})"
        )
    step = np.sum(field * grid.cell_mass[None, None, :], axis=2) * tg.dt
    out = np.zeros((field.shape[0], tg.n_steps + 1))
    np.cumsum(step, axis=1, out=out[:, 1:])
    return out


def pushforward(control, grid):
    """Atoms and weights of A_# mu for a cell-wise control (n, N, C[, m])."""
    control = np.asarray(control, dtype=float)
    C = grid.n_cells
    if control.ndim < 3 or control.shape[2] != C:
        raise InvalidArgumentError("control must be tabulated on every cell")
    if control.ndim == 4:
        return _pushforward_vector(control, grid)
    n, N, _ = control.shape
    order = np.argsort(control, axis=2, kind="stable")
    vals = np.take_along_axis(control, order, axis=2)
    mass = grid.cell_mass[order]
    new = np.ones_like(vals, dtype=bool)
    new[:, :, 1:] = vals[:, :, 1:] != vals[:, :, :-1]
    gid = np.cumsum(new, axis=2) - 1
    counts = gid[:, :, -1] + 1
    weights = np.zeros((n, N, C))
    pi, ii = np.meshgrid(np.arange(n), np.arange(N), indexing="ij")
    for j in range(C):
        # sequential accumulation in sorted cell order keeps the sum order fixed
        weights[pi, ii, gid[:, :, j]] += mass[:, :, j]
    points = np.full((n, N, C), np.nan)
    points[pi[..., None], ii[..., None], gid] = vals
    return RelaxedControlPath(points=points, weights=weights, counts=counts)


def _pushforward_vector(control, grid):
    n, N, C, m = control.shape
    points = np.full((n, N, C, m), np.nan)
    weights = np.zeros((n, N, C))
    counts = np.zeros((n, N), dtype=int)
    for p in range(n):
        for i in range(N):
            uniq, inv = np.unique(control[p, i], axis=0, return_inverse=True)
            inv = np.ravel(inv)
            counts[p, i] = len(uniq)
            points[p, i, : len(uniq)] = uniq
            for j in range(C):
                weights[p, i, inv[j]] += grid.cell_mass[j]
    return RelaxedControlPath(points=points, weights=weights, counts=counts)


@dataclass(frozen=True)
class QVEstimate:
    per_path: np.ndarray
    mean: np.ndarray
    se: np.ndarray


def _summarise(per_path):
    n = per_path.shape[0]
    mean = per_path.mean(axis=0)
    se = per_path.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
    return QVEstimate(per_path=per_path, mean=mean, se=se)


def quadratic_variation(paths, mask=None):
    """Realised QV sum_i (dM(A))^2 per path (and per noise dimension).

    ``paths`` is either a BaseMeasurePaths (then ``mask`` selects A) or an
    already integrated process of shape (n, N+1[, d]).
    """
    if isinstance(paths, BaseMeasurePaths):
        if mask is None:
            mask = np.ones(paths.grid.n_cells, dtype=bool)
        inc = paths.set_increments(mask)
    else:
        inc = np.diff(np.asarray(paths, dtype=float), axis=1)
    return _summarise(np.sum(inc**2, axis=1))


def covariation(paths, mask_a, mask_b):
    """Realised covariation sum_i dM(A) dM(B) per path and noise dimension."""
    inc_a = paths.set_increments(mask_a)
    inc_b = paths.set_increments(mask_b)
    return _summarise(np.sum(inc_a * inc_b, axis=1))
