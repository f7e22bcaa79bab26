"""Built-in coefficient families and benchmark models."""

import numpy as np

from .agent import HamiltonianSpec
from .dynamics import ModelSpec


def constant_sigma(mat):
    mat = np.atleast_2d(np.asarray(mat, dtype=float))

    def sigma(t, x):
        return np.broadcast_to(mat, np.shape(x)[:-1] + mat.shape)

    return sigma


def affine_sigma(base, slope):
    """sigma(t, x) = base + slope * x_1 (entrywise), for d-dimensional x."""
    base = np.atleast_2d(np.asarray(base, dtype=float))
    slope = np.atleast_2d(np.asarray(slope, dtype=float))

    def sigma(t, x):
        x = np.asarray(x, dtype=float)
        return base + slope * x[..., :1, None]

    return sigma


def constant_rate(r):
    r = float(r)

    def k_disc(t, x):
        return np.full(np.shape(x)[:-1], r)

    return k_disc


def linear_lambda(k=1):
    """lam(u) = u in every noise direction."""

    def lam(t, x, u):
        u = np.asarray(u, dtype=float)
        return np.repeat(u[..., None], k, axis=-1)

    return lam


def quadratic_cost(c=0.5):
    def f(t, x, u):
        u = np.asarray(u, dtype=float)
        return c * u * u

    return f


def zero_lambda(k=1):
    def lam(t, x, u):
        return np.zeros(np.shape(u) + (k,))

    return lam


def zero_cost(t, x, u):
    return np.zeros(np.shape(u))


def identity(v):
    return np.asarray(v, dtype=float)


def action_grid(u_max, n_u):
    return np.linspace(-u_max, u_max, n_u)


def lq_model(T=1.0, x0=0.0, sigma=1.0, u_max=2.0, n_u=41, rate=0.0):
    """d = k = 1, lam(u) = u, f(u) = u^2 / 2, U_a = identity.

    H(z) = max_{|u| <= u_max} (s u z - u^2/2) with maximiser clip(s z).
    """
    s = float(sigma)
    return ModelSpec(
        d=1,
        k=1,
        T=float(T),
        x0=np.array([float(x0)]),
        sigma=constant_sigma([[s]]),
        lam=linear_lambda(1),
        f=quadratic_cost(0.5),
        k_disc=constant_rate(rate),
        u_grid=action_grid(u_max, n_u),
        ua=identity,
        ua_inv=identity,
        sigma_bound=abs(s),
        lambda_bound=float(u_max),
        k_lower=float(rate),
        name="lq",
    )


def lq_maximizer(u_max=2.0):
    def maximizer(t, x, w):
        return np.clip(np.asarray(w, dtype=float)[..., 0], -u_max, u_max)

    return maximizer


def lq_hamiltonian(model, closed_form=True):
    u_max = float(np.max(np.abs(model.u_grid)))
    return HamiltonianSpec(model, lq_maximizer(u_max) if closed_form else None)


def brownian_model(T=1.0, x0=0.0, sigma=1.0, d=1, k=1):
    """Uncontrolled output X = x0 + sigma W (lam = 0, f = 0)."""
    mat = np.asarray(sigma, dtype=float)
    if mat.ndim == 0:
        mat = float(mat) * np.eye(d, k)
    return ModelSpec(
        d=d,
        k=k,
        T=float(T),
        x0=np.full(d, float(x0)),
        sigma=constant_sigma(mat),
        lam=zero_lambda(k),
        f=zero_cost,
        k_disc=constant_rate(0.0),
        u_grid=np.array([0.0]),
        ua=identity,
        ua_inv=identity,
        sigma_bound=float(np.linalg.norm(mat, 2)),
        lambda_bound=0.0,
        k_lower=0.0,
        name="brownian",
    )
