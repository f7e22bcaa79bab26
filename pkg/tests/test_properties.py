"""Property-based checks of the exact identities."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from relaxpa.agent import h_value, hamiltonian
from relaxpa.bsde import beta_norm
from relaxpa.config import config_from_dict
from relaxpa.dynamics import girsanov_density, simulate_state_p0
from relaxpa.measure import (
    TimeGrid,
    build_intensity_grid,
    integrate_intensity,
    path_normals,
    pushforward,
    quadratic_variation,
    simulate_base_measure,
)
from relaxpa.models import lq_hamiltonian, lq_model
from relaxpa.weakform import Bump

seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=30, deadline=None)
@given(seed=seeds, n_cells=st.integers(1, 12), n_levels=st.integers(1, 4))
def test_pushforward_intensity_identity(seed, n_cells, n_levels):
    rng = np.random.default_rng(seed)
    grid, tg = build_intensity_grid(n_cells), TimeGrid(1.0, 5)
    levels = rng.normal(size=n_levels)
    control = levels[rng.integers(0, n_levels, size=(3, 5, n_cells))]
    c = rng.normal(size=3)
    g = lambda u: np.sin(c[0] * u) + c[1] * u**2 + c[2]  # noqa: E731
    pf = pushforward(control, grid)
    lhs = np.cumsum(pf.integrate(g), axis=1) * tg.dt
    rhs = integrate_intensity(g(control), grid, tg)[:, 1:]
    assert np.max(np.abs(lhs - rhs)) <= 1e-12
    np.testing.assert_allclose(pf.weights.sum(axis=2), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(z=st.floats(-5, 5), x=st.floats(-3, 3), y=st.floats(-3, 3), rate=st.floats(-1, 1))
def test_grid_argmax_dominates(z, x, y, rate):
    model = lq_model(rate=rate)
    spec = lq_hamiltonian(model, closed_form=False)
    H, u = hamiltonian(spec, 0.0, np.array([[x]]), np.array([y]), np.array([[z]]))
    all_h = h_value(model, 0.0, np.full((len(model.u_grid), 1), x), np.full(len(model.u_grid), y),
                    np.full((len(model.u_grid), 1), z), model.u_grid)
    assert H[0] >= all_h.max() - 1e-12
    assert u[0] == model.u_grid[np.argmax(all_h)]


@settings(max_examples=30, deadline=None)
@given(seed=seeds, beta=st.floats(0, 3))
def test_beta_norm_homogeneity(seed, beta):
    rng = np.random.default_rng(seed)
    grid, tg = build_intensity_grid(3), TimeGrid(1.0, 4)
    y, z = rng.normal(size=(5, 5)), rng.normal(size=(5, 4, 3, 1))
    sig = np.array([[1.3]])
    assert beta_norm(2 * y, 2 * z, beta, sig, grid, tg) == 4 * beta_norm(y, z, beta, sig, grid, tg)


@settings(max_examples=40, deadline=None)
@given(seed=seeds, radius=st.floats(0.3, 3.0))
def test_bump_derivatives_match_finite_differences(seed, radius):
    rng = np.random.default_rng(seed)
    bump = Bump(center=rng.normal(size=2), radius=radius, scale=rng.uniform(0.5, 2.0, size=2))
    p = bump.center + rng.normal(size=(64, 2)) * radius
    h = 1e-6
    eye = np.eye(2)
    grad_fd = np.stack([(bump.value(p + h * e) - bump.value(p - h * e)) / (2 * h) for e in eye], axis=1)
    hess_fd = np.stack([(bump.grad(p + h * e) - bump.grad(p - h * e)) / (2 * h) for e in eye], axis=2)
    tol = 1e-5 * (1 + 1 / radius**2)
    assert np.max(np.abs(bump.grad(p) - grad_fd)) <= tol
    assert np.max(np.abs(bump.hess(p) - hess_fd)) <= 100 * tol
    far = bump.center + bump.scale * (radius * 1.01)
    assert bump.value(far[None])[0] == 0.0


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10**6), threads=st.integers(2, 4))
def test_normals_do_not_depend_on_thread_count(seed, threads):
    a = path_normals(seed, 0, 17, (3, 2), threads=1)
    b = path_normals(seed, 0, 17, (3, 2), threads=threads)
    assert np.array_equal(a, b)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 30))
def test_paths_are_prefix_stable(seed, n):
    grid, tg = build_intensity_grid(4), TimeGrid(1.0, 3)
    big = simulate_base_measure(grid, tg, 1, n, seed)
    small = simulate_base_measure(grid, tg, 1, 2, seed)
    assert np.array_equal(big.increments[:2], small.increments)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6), c=st.floats(-2, 2))
def test_density_positive_and_qv_empty(seed, c):
    model = lq_model()
    noise = simulate_base_measure(build_intensity_grid(4), TimeGrid(1.0, 5), 1, 50, seed)
    w = girsanov_density(model, np.full((50, 5, 4), c), simulate_state_p0(model, noise))
    assert np.all(w.density > 0)
    assert np.all(quadratic_variation(noise, np.zeros(4, dtype=bool)).per_path == 0)


@settings(max_examples=20, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    n_cells=st.integers(1, 64),
    T=st.floats(0.1, 5.0),
    stages=st.lists(st.sampled_from(["simulate", "optimize", "diagnostics"]), min_size=1, unique=True),
)
def test_config_round_trip(seed, n_cells, T, stages):
    cfg = config_from_dict({"model": {"n_cells": n_cells, "T": T}, "run": {"seed": seed, "stages": stages}})
    again = config_from_dict(cfg.to_dict())
    assert again == cfg and again.hash() == cfg.hash()
