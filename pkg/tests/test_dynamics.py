from dataclasses import replace

import numpy as np
import pytest

from relaxpa.dynamics import (
    ModelSpec,
    check_model,
    girsanov_density,
    left_inverse_sigma,
    reweighted_expectation,
    simulate_state_controlled,
    simulate_state_p0,
)
from relaxpa.errors import InvalidModelError, RankError
from relaxpa.measure import TimeGrid, build_intensity_grid, simulate_base_measure
from relaxpa.models import brownian_model, constant_sigma, lq_model, zero_lambda

from .conftest import within


def test_unit_sigma_state_is_the_brownian_path(small_noise, bm):
    x = simulate_state_p0(bm, small_noise).x[..., 0]
    np.testing.assert_array_equal(x, small_noise.brownian_path()[..., 0])


def test_zero_sigma_freezes_state(small_noise):
    model = replace(brownian_model(x0=0.3), sigma=constant_sigma([[0.0]]))
    assert np.all(simulate_state_p0(model, small_noise).x == 0.3)


def test_diagonal_sigma_variance():
    model = brownian_model(sigma=2.0, d=2, k=2)
    noise = simulate_base_measure(build_intensity_grid(4), TimeGrid(1.0, 20), 2, 10000, seed=7)
    xt = simulate_state_p0(model, noise).x[:, -1]
    v = xt.var(axis=0, ddof=1)
    se = np.sqrt(np.var((xt - xt.mean(axis=0)) ** 2, axis=0, ddof=1) / len(xt))
    assert np.all(np.abs(v - 4.0) <= 3 * se)


def test_zero_lambda_density_is_one(small_noise, bm):
    st = simulate_state_p0(bm, small_noise)
    w = girsanov_density(bm, np.zeros(small_noise.increments.shape[:3]), st)
    assert np.all(w.density == 1.0)


def test_constant_lambda_log_density_matches_formula(small_noise):
    model = lq_model()
    st = simulate_state_p0(model, small_noise)
    c = 0.7
    w = girsanov_density(model, np.full(small_noise.increments.shape[:3], c), st)
    wt = small_noise.brownian_path()[:, -1, 0]
    np.testing.assert_allclose(w.log_density, c * wt - c * c / 2, rtol=0, atol=1e-12)


def test_mean_density_is_one():
    model = lq_model()
    noise = simulate_base_measure(build_intensity_grid(16), TimeGrid(1.0, 50), 1, 10000, seed=4)
    st = simulate_state_p0(model, noise)
    dens = girsanov_density(model, np.full(noise.increments.shape[:3], 0.5), st).density
    assert within(dens.mean(), dens.std(ddof=1) / 100, 1.0)


def test_zero_lambda_controlled_equals_p0(small_noise):
    model = replace(lq_model(), lam=zero_lambda())
    grid, tg = small_noise.grid, small_noise.tg
    a = simulate_state_controlled(model, np.ones(small_noise.increments.shape[:3]), grid, tg, 2000, 11)
    np.testing.assert_array_equal(a.x, simulate_state_p0(model, small_noise).x)


def test_constant_drift_mean():
    model = lq_model(x0=0.2)
    grid, tg = build_intensity_grid(8), TimeGrid(1.0, 20)
    st = simulate_state_controlled(model, lambda t, x: np.ones((x.shape[0], 8)), grid, tg, 10000, 5)
    xt = st.x[:, -1, 0]
    assert within(xt.mean(), xt.std(ddof=1) / 100, 1.2)


def test_two_atom_relaxed_drift():
    model = lq_model()
    grid, tg = build_intensity_grid(8), TimeGrid(1.0, 20)
    ctrl = lambda t, x: np.broadcast_to(np.where(grid.cell_repr < 0.5, 0.0, 2.0), (x.shape[0], 8))  # noqa: E731
    xt = simulate_state_controlled(model, ctrl, grid, tg, 10000, 6).x[:, -1, 0]
    assert within(xt.mean(), xt.std(ddof=1) / 100, 1.0)


def test_left_inverse_examples():
    np.testing.assert_allclose(left_inverse_sigma(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(left_inverse_sigma(np.array([[1.0], [0.0]])), [[1.0, 0.0]])
    with pytest.raises(RankError):
        left_inverse_sigma(np.zeros((2, 2)))


def test_reweighting_helpers(small_noise):
    model = lq_model()
    st = simulate_state_p0(model, small_noise)
    vals = st.x[:, -1, 0]
    m, se = reweighted_expectation(vals)
    assert m == vals.mean()
    w = girsanov_density(model, np.ones(small_noise.increments.shape[:3]), st)
    c, cse = reweighted_expectation(np.full(len(vals), 2.5), w)
    assert within(c, cse, 2.5)
    xt, xse = reweighted_expectation(vals, w)
    assert within(xt, xse, 1.0)


def test_check_model_rejects_bad_inverse():
    model = replace(lq_model(), ua=np.exp, ua_inv=lambda y: y)
    with pytest.raises(InvalidModelError):
        check_model(model, np.zeros((4, 1)))


def test_model_shape_validation():
    with pytest.raises(InvalidModelError):
        ModelSpec(d=1, k=2, T=1.0, x0=[0.0], sigma=None, lam=None, f=None, k_disc=None, u_grid=[0.0])
    check_model(lq_model(), np.linspace(-2, 2, 9)[:, None])
