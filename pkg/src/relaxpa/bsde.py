"""Regression Monte-Carlo solver for BSDEs driven by the base measure.

Convention on a P0 ensemble (driver g, terminal value xi):

    Y_i = Y_{i+1} + G_i dt - sum_j z_ij^T sigma_i dM0_ij - dL_i,
    G_i = sum_j g(t_i, X_i, Y_i, z_ij) mu_j,    Y_N = xi.

The solution is the fixed point of a Picard map.  Each sweep freezes G from
the previous iterate, estimates Y_i = E[xi + sum_{l>=i} G_l dt | X_i] by least
squares, then splits the one-step martingale increment into a stochastic
integral against the noise (z) plus an orthogonal residual (dL).
"""

import warnings
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable

import numpy as np

from .agent import hamiltonian
from .dynamics import left_inverse_sigma, mean_se
from .errors import BasisError, InvalidArgumentError, MomentError

# above this many joint features the per-cell split falls back to separate fits
JOINT_FEATURE_LIMIT = 400


@dataclass(frozen=True)
class RegressionBasis:
    degree: int = 3
    ridge: float = 1e-8
    include_time: bool = False

    def features(self, x, t=None):
        """Standardised monomials of total degree <= ``degree``; (n, n_features).

        Zero-variance coordinates are dropped, so a deterministic state leaves
        only the intercept.
        """
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if self.include_time and t is not None:
            x = np.concatenate([x, np.full((x.shape[0], 1), float(t))], axis=1)
        sd = x.std(axis=0)
        keep = sd > 1e-12 * (1.0 + np.abs(x.mean(axis=0)))
        xs = (x[:, keep] - x[:, keep].mean(axis=0)) / sd[keep]
        cols = [np.ones(x.shape[0])]
        for deg in range(1, self.degree + 1):
            for combo in combinations_with_replacement(range(xs.shape[1]), deg):
                cols.append(np.prod(xs[:, combo], axis=1))
        return np.stack(cols, axis=1)


def _ridge_solve(F, targets, ridge, free_first=False):
    """Least squares F b = targets with relative ridge; raises BasisError.

    With ``free_first`` the first column (the intercept) is not penalised.
    """
    n, p = F.shape
    if n <= p:
        raise BasisError(f"{n} samples cannot identify {p} regression coefficients")
    A = F.T @ F
    scale = np.trace(A) / p
    pen = np.full(p, ridge * scale)
    if free_first:
        pen[0] = 0.0
    A[np.diag_indices(p)] += pen
    try:
        chol = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise BasisError("design matrix is numerically singular") from exc
    diag = np.diag(chol)
    if diag.min() <= 1e-10 * diag.max():
        raise BasisError("design matrix is numerically singular")
    rhs = F.T @ targets
    return np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))


def conditional_expectation(values, x, basis, t=None):
    """Fitted E[values | x] on the sample (values may be (n,) or (n, m))."""
    F = basis.features(x, t)
    coef = _ridge_solve(F, values, basis.ridge, free_first=True)
    return F @ coef


@dataclass(frozen=True)
class Driver:
    """Per-cell driver g(t, x (n,d), y (n,), z (n,C,d)) -> (n, C)."""

    fn: Callable = field(repr=False)
    lipschitz: float = 1.0
    name: str = "driver"

    def cell_values(self, t, x, y, z):
        n, C, _ = z.shape
        return np.broadcast_to(np.asarray(self.fn(t, x, y, z), dtype=float), (n, C))

    def averaged(self, t, x, y, z, mass):
        return np.sum(self.cell_values(t, x, y, z) * mass[None, :], axis=1)


def zero_driver():
    return Driver(lambda t, x, y, z: np.zeros(z.shape[:2]), lipschitz=0.0, name="zero")


def linear_driver(r):
    """g = -r y."""
    return Driver(lambda t, x, y, z: -r * y[:, None], lipschitz=abs(r), name=f"linear({r})")


def mixed_driver(a=0.5, b=0.5):
    """g = -a y + b sin(z_1): Lipschitz in both arguments."""
    return Driver(
        lambda t, x, y, z: -a * y[:, None] + b * np.sin(z[..., 0]),
        lipschitz=max(abs(a), abs(b)),
        name=f"mixed({a},{b})",
    )


def hamiltonian_driver(spec, lipschitz=None):
    """g = H(t, x, y, z) from a HamiltonianSpec."""
    model = spec.model

    def fn(t, x, y, z):
        n, C, d = z.shape
        H, _ = hamiltonian(spec, t, np.broadcast_to(x[:, None, :], (n, C, d)), y[:, None], z)
        return H

    if lipschitz is None:
        lipschitz = max(
            model.sigma_bound * model.lambda_bound if np.isfinite(model.sigma_bound) else 1.0,
            abs(model.k_lower) if np.isfinite(model.k_lower) else 0.0,
            1e-12,
        )
    return Driver(fn, lipschitz=float(lipschitz), name="hamiltonian")


@dataclass(frozen=True)
class BsdeSolution:
    y: np.ndarray
    z: np.ndarray
    l_increments: np.ndarray
    beta_norm_trace: np.ndarray
    beta: float
    terminal_error: float
    consistency_residual: np.ndarray
    l_variance_ratio: float
    diverging: bool = False
    iterations: int = 0
    y0_se: float = 0.0

    @property
    def contraction_ratios(self):
        tr = self.beta_norm_trace
        return tr[1:] / np.where(tr[:-1] > 0, tr[:-1], np.nan)


def _sigma_steps(model, states):
    """sigma(t_i, X_i) for every step: (n, N, d, k)."""
    tg = states.driven_by.tg
    n, N1, d = states.x.shape
    out = np.empty((n, N1 - 1, d, model.k))
    for i in range(N1 - 1):
        out[:, i] = np.broadcast_to(model.sigma(tg.times[i], states.x[:, i]), (n, d, model.k))
    return out


def _kw_step(incr, x_i, dm_i, mass, dt, basis, t=None):
    """Per-cell integrands w_ij (n, C, k) for one step."""
    F = basis.features(x_i, t)
    n, C, k = dm_i.shape
    p = F.shape[1]
    if p * C * k <= JOINT_FEATURE_LIMIT:
        # joint fit removes the other cells' noise from each cell's estimate
        design = (F[:, :, None, None] * dm_i[:, None, :, :]).reshape(n, p * C * k)
        coef = _ridge_solve(design, incr, basis.ridge).reshape(p, C, k)
        return np.einsum("np,pck->nck", F, coef)
    targets = (incr[:, None, None] * dm_i / (mass[None, :, None] * dt)).reshape(n, C * k)
    coef = _ridge_solve(F, targets, basis.ridge, free_first=True)
    return (F @ coef).reshape(n, C, k)


def _left_inverses(sig):
    """Left inverses per (path, step): (n, N, d, k) -> (n, N, k, d).

    Steps where sigma is the same on every path are inverted once.
    """
    n, N, d, k = sig.shape
    out = np.empty((n, N, k, d))
    for i in range(N):
        s = sig[:, i]
        if np.all(s == s[0]):
            out[:, i] = left_inverse_sigma(s[0])
        else:
            out[:, i] = left_inverse_sigma(s)
    return out


def kw_split(increments, noise, states, basis=None, model=None, sig=None, linv=None):
    """Split martingale increments into sum_j z_ij^T sigma dM0_ij plus residual.

    Returns (z (n, N, C, d), residual (n, N)).  ``sig`` are precomputed
    sigma(t_i, X_i) values; otherwise ``model`` provides them.
    """
    basis = basis or RegressionBasis()
    increments = np.asarray(increments, dtype=float)
    n, N, C, k = noise.increments.shape
    if increments.shape != (n, N):
        raise InvalidArgumentError("increments must be (n_paths, n_steps)")
    if sig is None:
        if model is None:
            raise InvalidArgumentError("need the model or tabulated sigma")
        sig = _sigma_steps(model, states)
    if linv is None:
        linv = _left_inverses(sig)
    d = sig.shape[2]
    mass, dt = noise.grid.cell_mass, noise.tg.dt
    z = np.empty((n, N, C, d))
    resid = np.empty((n, N))
    for i in range(N):
        w = _kw_step(increments[:, i], states.x[:, i], noise.increments[:, i], mass, dt, basis)
        z[:, i] = np.einsum("nkd,nck->ncd", linv[:, i], w)
        resid[:, i] = increments[:, i] - np.sum(w * noise.increments[:, i], axis=(1, 2))
    return z, resid


def beta_norm(y, z, beta, sig, grid, tg):
    """E sum_i sum_j e^{beta t_i} (y_i^2 + |z_ij^T sigma_i|^2) mu_j dt.

    ``y`` is (n, N[+1]) (the terminal column is ignored), ``z`` (n, N, C, d),
    ``sig`` (n, N, d, k) or a single (d, k) matrix.
    """
    N = tg.n_steps
    y = np.asarray(y, dtype=float)[:, :N]
    z = np.asarray(z, dtype=float)
    sig = np.asarray(sig, dtype=float)
    if sig.ndim == 2:
        zs = np.einsum("nicd,dk->nick", z, sig)
    else:
        zs = np.einsum("nicd,nidk->nick", z, sig)
    zz = np.sum(np.sum(zs**2, axis=3) * grid.cell_mass[None, None, :], axis=2)
    w = np.exp(beta * tg.times[:N]) * tg.dt
    return float(np.mean(np.sum((y**2 + zz) * w[None, :], axis=1)))


def default_beta(lipschitz):
    c = max(float(lipschitz), 1e-12)
    alpha = 4.0 * c
    return 1.0 + alpha * c


def solve_bsde(model, xi, states, driver=None, basis=None, n_picard=8, beta=None, tol=1e-6):
    """Picard iteration for (Y, Z, L) on a P0 ensemble ``states``."""
    noise = states.driven_by
    basis = basis or RegressionBasis()
    driver = driver or zero_driver()
    xi = np.asarray(xi, dtype=float)
    n, N, C, k = noise.increments.shape
    if xi.shape != (n,):
        raise InvalidArgumentError("xi must hold one value per path")
    if not np.all(np.isfinite(xi)) or not np.isfinite(xi.var()):
        raise MomentError("terminal value has non-finite sample moments")
    beta = default_beta(driver.lipschitz) if beta is None else float(beta)
    tg, grid = noise.tg, noise.grid
    mass, dt = grid.cell_mass, tg.dt
    d = model.d
    sig = _sigma_steps(model, states)
    linv = _left_inverses(sig)
    x = states.x

    y = np.zeros((n, N + 1))
    z = np.zeros((n, N, C, d))
    trace = []
    future = np.empty((n, N + 1))
    diverging = False
    it = 0
    for it in range(1, n_picard + 1):
        G = np.empty((n, N))
        for i in range(N):
            G[:, i] = driver.averaged(tg.times[i], x[:, i], y[:, i], z[:, i], mass)
        # future[:, i] = xi + sum_{l >= i} G_l dt
        future[:, N] = xi
        future[:, :N] = xi[:, None] + np.cumsum(G[:, ::-1], axis=1)[:, ::-1] * dt
        y_new = np.empty((n, N + 1))
        y_new[:, N] = xi
        for i in range(N):
            y_new[:, i] = conditional_expectation(future[:, i], x[:, i], basis, tg.times[i])
        incr = y_new[:, 1:] - y_new[:, :-1] + G * dt
        z_new, _ = kw_split(incr, noise, states, basis, sig=sig, linv=linv)
        diff = beta_norm(y_new - y, z_new - z, beta, sig, grid, tg)
        trace.append(np.sqrt(diff))
        y, z = y_new, z_new
        if len(trace) >= 3 and trace[-1] >= trace[-2]:
            diverging = True
        if trace[-1] < tol:
            break
    if diverging:
        warnings.warn("Picard differences stopped decreasing", RuntimeWarning, stacklevel=2)

    # final split with the converged driver so that the recursion closes exactly
    G = np.empty((n, N))
    for i in range(N):
        G[:, i] = driver.averaged(tg.times[i], x[:, i], y[:, i], z[:, i], mass)
    zsig = np.einsum("nicd,nidk->nick", z, sig)
    stoch = np.sum(zsig * noise.increments, axis=(2, 3))
    dl = y[:, 1:] - y[:, :-1] + G * dt - stoch
    resid = y[:, :-1] - (y[:, 1:] + G * dt - stoch - dl)
    dy_var = np.sum(np.var(y[:, 1:] - y[:, :-1], axis=0))
    l_ratio = float(np.sum(np.var(dl, axis=0)) / dy_var) if dy_var > 0 else 0.0
    return BsdeSolution(
        y=y,
        z=z,
        l_increments=dl,
        beta_norm_trace=np.array(trace),
        beta=beta,
        terminal_error=float(np.max(np.abs(y[:, N] - xi))),
        consistency_residual=np.mean(np.abs(resid), axis=0),
        l_variance_ratio=l_ratio,
        diverging=diverging,
        iterations=it,
        y0_se=float(mean_se(future[:, 0])[1]),
    )


def orthogonality_check(solution, states, model, probes=None):
    """Mean covariation sum_i dL_i * (zeta_i^T sigma_i dW0_i) for probe fields.

    ``probes`` maps names to callables zeta(t, x (n, d)) -> (n, d); defaults to
    the constant 1 and the state itself.  Returns {name: (mean, se)}.
    """
    noise = states.driven_by
    tg = noise.tg
    probes = probes or {"one": lambda t, x: np.ones_like(x), "state": lambda t, x: x}
    sig = _sigma_steps(model, states)
    dw = noise.brownian_increments()
    out = {}
    for name, zeta in probes.items():
        acc = np.zeros(states.n_paths)
        for i in range(tg.n_steps):
            zt = np.asarray(zeta(tg.times[i], states.x[:, i]), dtype=float)
            dx = np.einsum("nd,ndk,nk->n", zt, sig[:, i], dw[:, i])
            acc += solution.l_increments[:, i] * dx
        m, se = mean_se(acc)
        out[name] = (float(m), float(se))
    return out


@dataclass(frozen=True)
class AprioriReport:
    lhs: float
    rhs: float
    ratio: object
    terms: dict


def apriori_bound_check(solution, xi, driver_at_zero, p=2.0, sig=None, model=None, states=None, grid=None, tg=None):
    """Compare the solution's p-moments with those of the data (xi, g(0, 0)).

    lhs = E sup|Y|^p + E (int int |z^T sigma|^2 dm0)^{p/2} + E [L]_T^{p/2}
    rhs = E |xi|^p + E (int |g(0,0)| dt)^p.  The ratio is the implied constant.
    """
    if not 1.0 < p <= 2.0:
        raise InvalidArgumentError("p must lie in (1, 2]")
    if sig is None:
        sig = _sigma_steps(model, states)
    grid = grid or states.driven_by.grid
    tg = tg or states.driven_by.tg
    y, z, dl = solution.y, solution.z, solution.l_increments
    sig = np.asarray(sig, dtype=float)
    if sig.ndim == 2:
        zs = np.einsum("nicd,dk->nick", z, sig)
    else:
        zs = np.einsum("nicd,nidk->nick", z, sig)
    qz = np.sum(np.sum(np.sum(zs**2, axis=3) * grid.cell_mass[None, None, :], axis=2), axis=1) * tg.dt
    terms = {
        "sup_y": float(np.mean(np.max(np.abs(y), axis=1) ** p)),
        "z": float(np.mean(qz ** (p / 2))),
        "l": float(np.mean(np.sum(dl**2, axis=1) ** (p / 2))),
        "xi": float(np.mean(np.abs(np.asarray(xi, dtype=float)) ** p)),
        "driver": float(np.mean((np.sum(np.abs(driver_at_zero), axis=1) * tg.dt) ** p)),
    }
    if not all(np.isfinite(v) for v in terms.values()):
        raise MomentError("non-finite moment in the a-priori bound")
    lhs = terms["sup_y"] + terms["z"] + terms["l"]
    rhs = terms["xi"] + terms["driver"]
    ratio = None if rhs == 0 else lhs / rhs
    return AprioriReport(lhs=lhs, rhs=rhs, ratio=ratio, terms=terms)


def driver_at_zero(driver, states):
    """|g(t_i, X_i, 0, 0)| per (path, step)."""
    noise = states.driven_by
    n, N, C, _ = noise.increments.shape
    d = states.x.shape[2]
    out = np.empty((n, N))
    for i in range(N):
        g = driver.averaged(noise.tg.times[i], states.x[:, i], np.zeros(n), np.zeros((n, C, d)), noise.grid.cell_mass)
        out[:, i] = np.abs(g)
    return out
