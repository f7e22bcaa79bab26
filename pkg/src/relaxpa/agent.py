"""Agent side: Hamiltonian, best responses, discounting and valuation.

With h(t, x, y, z, u) = (sigma lam(u)) . z - f(u) - k y, the Hamiltonian is
H = max_u h.  Since h depends on z only through w = sigma^T z, closed-form
maximisers are written as ``maximizer(t, x, w) -> u``.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dynamics import GirsanovWeights, mean_se
from .errors import InvalidArgumentError, InvalidModelError, ValuationError


@dataclass(frozen=True)
class HamiltonianSpec:
    model: object
    maximizer: Optional[Callable] = field(default=None, repr=False)

    def __post_init__(self):
        if self.maximizer is None and len(self.model.u_grid) == 0:
            raise InvalidModelError("empty action grid and no closed-form maximiser")

    @property
    def mode(self):
        return "grid_argmax" if self.maximizer is None else "closed_form"


@dataclass(frozen=True)
class DiscountPath:
    K: np.ndarray

    def at(self, i):
        return self.K[:, i]


def _sigma_w(model, t, x, z):
    """w = sigma(t, x)^T z with x (..., d), z (..., d) -> (..., k)."""
    s = np.asarray(model.sigma(t, x), dtype=float)
    s = np.broadcast_to(s, np.broadcast_shapes(s.shape, z.shape[:-1] + s.shape[-2:]))
    return np.einsum("...dk,...d->...k", s, z)


def h_value(model, t, x, y, w, u):
    """h for x (..., d), y (...), w (..., k), action u (...)."""
    lam = np.asarray(model.lam(t, x, u), dtype=float)
    gain = np.sum(lam * w, axis=-1)
    cost = np.asarray(model.f(t, x, u), dtype=float)
    return gain - cost - np.asarray(model.k_disc(t, x), dtype=float) * y


def hamiltonian(spec, t, x, y, z):
    """(H, u_star) for batched x (..., d), y (...), z (..., d).

    Grid mode maximises over ``u_grid`` (argmax returns the first maximiser, so
    ties go to the lowest index).
    """
    model = spec.model
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(z)):
        raise InvalidArgumentError("z must be finite")
    w = _sigma_w(model, t, x, z)
    shape = np.broadcast_shapes(x.shape[:-1], y.shape, w.shape[:-1])
    x = np.broadcast_to(x, shape + x.shape[-1:])
    w = np.broadcast_to(w, shape + w.shape[-1:])
    y = np.broadcast_to(y, shape)
    if spec.maximizer is not None:
        u = np.broadcast_to(np.asarray(spec.maximizer(t, x, w), dtype=float), shape)
        return h_value(model, t, x, y, w, u), u
    grid = model.u_grid
    ushape = (1,) * len(shape) + (len(grid),)
    lam = np.asarray(model.lam(t, x[..., None, :], grid.reshape(ushape)), dtype=float)
    gain = np.sum(lam * w[..., None, :], axis=-1)
    cost = np.asarray(model.f(t, x[..., None, :], grid.reshape(ushape)), dtype=float)
    hv = gain - cost
    idx = np.argmax(hv, axis=-1)
    best = np.take_along_axis(hv, idx[..., None], axis=-1)[..., 0]
    kv = np.asarray(model.k_disc(t, x), dtype=float)
    return best - kv * y, grid[idx]


def f_hat(spec, t, x):
    """-H(t, x, 0, 0): the smallest running cost over the action set."""
    x = np.asarray(x, dtype=float)
    H, _ = hamiltonian(spec, t, x, np.zeros(x.shape[:-1]), np.zeros_like(x))
    return -H


def best_response(spec, states, y_path, z_field):
    """Pointwise maximiser a(t, X_t, Y_t, Z_t(v)) on every (path, step, cell).

    ``z_field`` is (n, N, C, d).  Cells sharing the same z get the same action.
    """
    x = states.x
    n, N1, d = x.shape
    z_field = np.asarray(z_field, dtype=float)
    if z_field.ndim != 4 or z_field.shape[:2] != (n, N1 - 1) or z_field.shape[3] != d:
        raise InvalidArgumentError("z_field must be (n_paths, n_steps, n_cells, d)")
    times = states.driven_by.tg.times
    C = z_field.shape[2]
    out = np.empty((n, N1 - 1, C))
    for i in range(N1 - 1):
        xi = np.broadcast_to(x[:, i, None, :], (n, C, d))
        yi = np.broadcast_to(y_path[:, i, None], (n, C))
        _, u = hamiltonian(spec, times[i], xi, yi, z_field[:, i])
        out[:, i] = u
    return out


def discount_path(model, states):
    """K_t = exp(-int_0^t k ds), left Riemann sum."""
    tg = states.driven_by.tg
    n, N1, _ = states.x.shape
    rates = np.empty((n, N1 - 1))
    for i in range(N1 - 1):
        rates[:, i] = np.broadcast_to(model.k_disc(tg.times[i], states.x[:, i]), (n,))
    K = np.ones((n, N1))
    K[:, 1:] = np.exp(-np.cumsum(rates, axis=1) * tg.dt)
    return DiscountPath(K=K)


def running_cost(model, states, control):
    """sum_j f(t_i, X_i, A_i(v_j)) mu_j per (path, step): (n, N)."""
    grid = states.driven_by.grid
    times = states.driven_by.tg.times
    control = np.asarray(control, dtype=float)
    n, N, C = control.shape
    out = np.empty((n, N))
    for i in range(N):
        fv = np.broadcast_to(model.f(times[i], states.x[:, i, None, :], control[:, i]), (n, C))
        out[:, i] = np.sum(fv * grid.cell_mass[None, :], axis=1)
    return out


def hill_tail_index(values, frac=0.05):
    """Hill estimate of the tail exponent of |values| (inf for bounded samples)."""
    a = np.sort(np.abs(np.asarray(values, dtype=float)))[::-1]
    m = max(2, int(frac * len(a)))
    if len(a) <= m or a[m] <= 0:
        return float("inf")
    logs = np.log(a[:m]) - np.log(a[m])
    mean = logs.mean()
    return float("inf") if mean <= 0 else float(1.0 / mean)


@dataclass(frozen=True)
class AgentValue:
    value: float
    se: float
    tail_index: float
    per_path: np.ndarray = field(repr=False)


def agent_value(model, xi, control, states, weights=None, discount=None):
    """E^{P^A}[K_T U_a(xi) - int K f dm^A].

    Pass ``weights`` (GirsanovWeights for A) when ``states`` were simulated
    under P0; leave it None when ``states`` come from a direct P^A simulation.
    """
    xi = np.asarray(xi, dtype=float)
    ua = np.asarray(model.ua(xi), dtype=float)
    bad = np.flatnonzero(~np.isfinite(ua))
    if len(bad):
        raise ValuationError(f"U_a(xi) is not finite on {len(bad)} paths", paths=bad[:20])
    K = (discount or discount_path(model, states)).K
    dt = states.driven_by.tg.dt
    cost = np.sum(K[:, :-1] * running_cost(model, states, control), axis=1) * dt
    per_path = K[:, -1] * ua - cost
    v, se = _expect(per_path, weights)
    return AgentValue(value=float(v), se=float(se), tail_index=hill_tail_index(ua), per_path=per_path)


def _expect(values, weights, index=-1):
    if weights is None:
        return mean_se(values)
    if isinstance(weights, GirsanovWeights):
        dens = np.exp(weights.cumulative[:, index])
    else:
        dens = np.asarray(weights, dtype=float)
    return mean_se(values * dens)


@dataclass(frozen=True)
class DriftReport:
    intervals: list
    drift: np.ndarray
    se: np.ndarray

    def all_zero(self, band=3.0):
        return bool(np.all(np.abs(self.drift) <= band * self.se))

    def non_positive(self, band=3.0):
        return bool(np.all(self.drift <= band * self.se))

    def negative(self, band=3.0):
        return bool(np.any(self.drift < -band * self.se))


def r_process(model, y_path, control, states, discount=None):
    """R_t = K_t Y_t - int_0^t int K f dm^A ds on the grid."""
    K = (discount or discount_path(model, states)).K
    dt = states.driven_by.tg.dt
    cost = K[:, :-1] * running_cost(model, states, control) * dt
    R = K * y_path
    R[:, 1:] -= np.cumsum(cost, axis=1)
    return R


def verify_supermartingale_R(model, y_path, control, states, probe_times, weights=None, discount=None):
    """Per-unit-time drift of R over consecutive probe intervals, +- SE.

    Expectations are taken under P^A: via the density up to the interval end
    when ``weights`` is given, by plain means otherwise.
    """
    tg = states.driven_by.tg
    R = r_process(model, y_path, control, states, discount)
    idx = [tg.index(t) for t in probe_times]
    if any(b <= a for a, b in zip(idx[:-1], idx[1:])):
        raise InvalidArgumentError("probe times must be strictly increasing")
    drift, se, intervals = [], [], []
    for a, b in zip(idx[:-1], idx[1:]):
        m, s = _expect(R[:, b] - R[:, a], weights, index=b)
        span = (b - a) * tg.dt
        drift.append(m / span)
        se.append(s / span)
        intervals.append((float(tg.times[a]), float(tg.times[b])))
    return DriftReport(intervals=intervals, drift=np.array(drift), se=np.array(se))


def control_from_cells(states, values):
    """Tabulate a cell-wise action vector (C,) or callable of cell repr as (n, N, C)."""
    noise = states.driven_by
    if callable(values):
        values = values(noise.grid.cell_repr)
    values = np.asarray(values, dtype=float)
    if values.ndim == 0:
        values = np.full(noise.grid.n_cells, float(values))
    n, N = noise.n_paths, noise.tg.n_steps
    return np.broadcast_to(values, (n, N, noise.grid.n_cells)).copy()


__all__ = [
    "AgentValue",
    "DiscountPath",
    "DriftReport",
    "HamiltonianSpec",
    "agent_value",
    "best_response",
    "control_from_cells",
    "discount_path",
    "f_hat",
    "h_value",
    "hamiltonian",
    "hill_tail_index",
    "r_process",
    "running_cost",
    "verify_supermartingale_R",
]
