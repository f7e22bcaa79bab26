"""Output process X under P0 and under controlled measures P^A.

Coefficients are vectorised callables that broadcast over leading axes:

    sigma(t, x[..., d])          -> [..., d, k]
    lam(t, x[..., d], u[...])    -> [..., k]
    f(t, x[..., d], u[...])      -> [...]
    k_disc(t, x[..., d])         -> [...]

Actions are real scalars; a control is tabulated as an array (n, N, C) giving
the action A_t(v) on every path, step and cell.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidArgumentError, InvalidModelError, RankError, SimulationError
from .measure import BaseMeasurePaths, simulate_base_measure

RANK_RTOL = 1e-8


def _identity(v):
    return v


@dataclass(frozen=True)
class ModelSpec:
    d: int
    k: int
    T: float
    x0: np.ndarray
    sigma: Callable
    lam: Callable
    f: Callable
    k_disc: Callable
    u_grid: np.ndarray
    ua: Callable = _identity
    ua_inv: Callable = _identity
    ua_range: tuple = (-np.inf, np.inf)
    sigma_bound: float = np.inf
    lambda_bound: float = np.inf
    k_lower: float = -np.inf
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))
        object.__setattr__(self, "u_grid", np.atleast_1d(np.asarray(self.u_grid, dtype=float)))
        if self.x0.shape != (self.d,):
            raise InvalidModelError(f"x0 must have shape ({self.d},)")
        if self.k > self.d:
            raise InvalidModelError("noise dimension k must not exceed state dimension d")
        if self.u_grid.ndim != 1 or len(self.u_grid) == 0:
            raise InvalidModelError("u_grid must be a non-empty 1-d array of actions")

    def in_ua_range(self, y):
        lo, hi = self.ua_range
        y = np.asarray(y, dtype=float)
        return np.isfinite(y) & (y >= lo) & (y <= hi)


@dataclass(frozen=True)
class StatePaths:
    x: np.ndarray
    driven_by: BaseMeasurePaths
    measure_tag: str = "P0"
    actions: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_paths(self):
        return self.x.shape[0]


@dataclass(frozen=True)
class GirsanovWeights:
    log_density: np.ndarray
    cumulative: np.ndarray

    @property
    def density(self):
        return np.exp(self.log_density)


def check_model(model, x_probe, t_probe=None, n_probe=64):
    """Check the standing assumptions on the given probe states.

    Raises InvalidModelError / RankError with the violated condition.
    """
    x_probe = np.asarray(x_probe, dtype=float).reshape(-1, model.d)
    ts = np.linspace(0.0, model.T, 5) if t_probe is None else np.atleast_1d(t_probe)
    for t in ts:
        s = np.asarray(model.sigma(t, x_probe), dtype=float)
        left_inverse_sigma(s)
        if np.max(np.linalg.norm(s, ord=2, axis=(-2, -1))) > model.sigma_bound * (1 + 1e-12):
            raise InvalidModelError(f"sigma exceeds declared bound at t={t}")
        lam = np.asarray(model.lam(t, x_probe[:, None, :], model.u_grid[None, :]), dtype=float)
        if not np.all(np.isfinite(lam)):
            raise InvalidModelError("lambda is not finite on the action grid")
        if np.max(np.linalg.norm(lam, axis=-1)) > model.lambda_bound * (1 + 1e-12):
            raise InvalidModelError(f"lambda exceeds declared bound at t={t}")
        fu = np.asarray(model.f(t, x_probe[:, None, :], model.u_grid[None, :]), dtype=float)
        if not np.all(np.isfinite(fu)):
            raise InvalidModelError("running cost must be finite on the action grid")
        kv = np.asarray(model.k_disc(t, x_probe), dtype=float)
        if np.min(kv) < model.k_lower - 1e-12:
            raise InvalidModelError("discount rate violates its declared lower bound")
    lo, hi = model.ua_range
    lo = -50.0 if not np.isfinite(lo) else lo
    hi = 50.0 if not np.isfinite(hi) else hi
    probe = np.linspace(lo, hi, n_probe)[1:-1]
    c = np.asarray(model.ua_inv(probe), dtype=float)
    back = np.asarray(model.ua(c), dtype=float)
    if not np.allclose(back, probe, rtol=1e-8, atol=1e-10):
        raise InvalidModelError("ua_inv is not an inverse of ua on its range")
    if not (np.all(np.diff(back) > 0) or np.all(np.diff(back) < 0)):
        raise InvalidModelError("U_a is not strictly monotone on the probe grid")


def left_inverse_sigma(mat):
    """Moore-Penrose left inverse (s^T s)^{-1} s^T of a (.., d, k) matrix."""
    mat = np.asarray(mat, dtype=float)
    if mat.ndim < 2:
        raise InvalidArgumentError("expected a (d, k) matrix")
    sv = np.linalg.svd(mat, compute_uv=False)
    smax = sv[..., 0]
    smin = sv[..., -1]
    if np.any(smax <= 0) or np.any(smin <= RANK_RTOL * smax):
        raise RankError("sigma does not have full column rank k")
    return np.linalg.pinv(mat)


def _check_finite(arr, what):
    bad = ~np.all(np.isfinite(arr.reshape(arr.shape[0], -1)), axis=1)
    if np.any(bad):
        p = int(np.argmax(bad))
        raise SimulationError(f"non-finite {what} on path {p}", path_index=p)


def simulate_state_p0(model, noise):
    """Euler scheme for X_{i+1} = X_i + sigma(t_i, X_i) dW0_i."""
    if noise.k != model.k:
        raise InvalidArgumentError("noise dimension does not match the model")
    tg = noise.tg
    n = noise.n_paths
    dw = noise.brownian_increments()
    x = np.empty((n, tg.n_steps + 1, model.d))
    x[:, 0] = model.x0
    times = tg.times
    for i in range(tg.n_steps):
        s = np.broadcast_to(model.sigma(times[i], x[:, i]), (n, model.d, model.k))
        x[:, i + 1] = x[:, i] + np.einsum("ndk,nk->nd", s, dw[:, i])
        _check_finite(x[:, i + 1], "state")
    return StatePaths(x=x, driven_by=noise, measure_tag="P0")


def lambda_field(model, t, x, actions):
    """lam(t, x, A(v)) per cell: x (n, d), actions (n, C) -> (n, C, k)."""
    n, C = actions.shape
    lam = model.lam(t, x[:, None, :], actions)
    return np.broadcast_to(np.asarray(lam, dtype=float), (n, C, model.k))


def girsanov_density(model, control, states, noise=None):
    """log dP^A/dP0 = int lam . dM0 - 1/2 int |lam|^2 dm0 (left-point sums)."""
    noise = noise or states.driven_by
    control = np.asarray(control, dtype=float)
    n, N, C, _ = noise.increments.shape
    if control.shape != (n, N, C):
        raise InvalidArgumentError(f"control shape {control.shape} != {(n, N, C)}")
    mass = noise.grid.cell_mass
    dt = noise.tg.dt
    times = noise.tg.times
    cum = np.zeros((n, N + 1))
    for i in range(N):
        lam = lambda_field(model, times[i], states.x[:, i], control[:, i])
        if not np.all(np.isfinite(lam)):
            raise InvalidModelError(f"non-finite lambda at step {i}")
        stoch = np.sum(np.sum(lam * noise.increments[:, i], axis=2), axis=1)
        comp = np.sum(np.sum(lam**2, axis=2) * mass[None, :], axis=1) * dt
        cum[:, i + 1] = cum[:, i] + stoch - 0.5 * comp
    return GirsanovWeights(log_density=cum[:, -1].copy(), cumulative=cum)


def simulate_state_controlled(model, control, grid, tg, n_paths, seed, threads=None, noise=None):
    """Direct simulation of X under P^A.

    ``control`` is either a tabulated array (n, N, C) or a feedback callable
    ``control(t, x) -> (n, C)``.  Drift is the m^A-average of sigma*lam; the
    driving noise is a fresh M~^A drawn from ``seed`` (or ``noise`` if given).
    """
    if noise is None:
        noise = simulate_base_measure(grid, tg, model.k, n_paths, seed, threads)
    n, N, C, _ = noise.increments.shape
    mass = grid.cell_mass
    dt = tg.dt
    times = tg.times
    dw = noise.brownian_increments()
    x = np.empty((n, N + 1, model.d))
    x[:, 0] = model.x0
    actions = np.empty((n, N, C))
    for i in range(N):
        if callable(control):
            a = np.broadcast_to(np.asarray(control(times[i], x[:, i]), dtype=float), (n, C))
        else:
            a = np.asarray(control[:, i], dtype=float)
        actions[:, i] = a
        lam = lambda_field(model, times[i], x[:, i], a)
        drift = np.sum(lam * mass[None, :, None], axis=1) * dt
        s = np.broadcast_to(model.sigma(times[i], x[:, i]), (n, model.d, model.k))
        x[:, i + 1] = x[:, i] + np.einsum("ndk,nk->nd", s, drift + dw[:, i])
        _check_finite(x[:, i + 1], "state")
    return StatePaths(x=x, driven_by=noise, measure_tag="PA", actions=actions)


def base_increments_from_tilted(model, states):
    """Recover dM0 = dM~ + lam(A) mu dt on a directly simulated P^A ensemble."""
    noise = states.driven_by
    if states.actions is None:
        raise InvalidArgumentError("states carry no control actions")
    n, N, C, k = noise.increments.shape
    out = np.empty_like(noise.increments)
    times = noise.tg.times
    for i in range(N):
        lam = lambda_field(model, times[i], states.x[:, i], states.actions[:, i])
        out[:, i] = noise.increments[:, i] + lam * noise.grid.cell_mass[None, :, None] * noise.tg.dt
    return out


def mean_se(values):
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    m = values.mean(axis=0)
    se = values.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(m)
    return m, se


def reweighted_expectation(values, weights=None):
    """E^{P^A}[values] as the P0-mean of values * dP^A/dP0, with its SE."""
    values = np.asarray(values, dtype=float)
    if weights is None:
        return mean_se(values)
    dens = weights.density if isinstance(weights, GirsanovWeights) else np.asarray(weights)
    if dens.shape[0] != values.shape[0]:
        raise InvalidArgumentError("values and weights come from different ensembles")
    return mean_se(values * dens.reshape((-1,) + (1,) * (values.ndim - 1)))
