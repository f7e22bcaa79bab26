from dataclasses import replace

import numpy as np

from relaxpa.agent import (
    agent_value,
    best_response,
    discount_path,
    f_hat,
    hamiltonian,
    verify_supermartingale_R,
)
from relaxpa.dynamics import simulate_state_p0
from relaxpa.measure import TimeGrid, build_intensity_grid, simulate_base_measure
from relaxpa.models import constant_rate, lq_hamiltonian, lq_model, zero_cost
from relaxpa.principal import (
    agent_states,
    constant_z,
    generate_contract,
    LPolicy,
    simulate_agent_response,
)

from . import oracles
from .conftest import within


def _h(spec, z):
    return hamiltonian(spec, 0.0, np.zeros((1, 1)), np.zeros(1), np.array([[z]]))


def test_lq_hamiltonian_values(lq):
    model, closed = lq
    grid = lq_hamiltonian(model, closed_form=False)
    dz = model.u_grid[1] - model.u_grid[0]
    for spec in (closed, grid):
        H, u = _h(spec, 1.0)
        assert abs(H[0] - oracles.LQ_H_AT_1) <= dz**2 and abs(u[0] - 1.0) <= dz
        H, u = _h(spec, 0.0)
        assert H[0] == 0.0 and u[0] == 0.0
        H, u = _h(spec, 3.0)
        assert abs(H[0] - oracles.LQ_H_AT_3) < 1e-12 and u[0] == oracles.LQ_U_AT_3


def test_grid_tie_goes_to_lowest_index(lq):
    model, _ = lq
    flat = replace(model, f=zero_cost, lam=lambda t, x, u: np.zeros(np.broadcast_shapes(x.shape[:-1], np.shape(u)) + (1,)))
    _, u = _h(lq_hamiltonian(flat, closed_form=False), 1.0)
    assert u[0] == model.u_grid[0]


def test_f_hat_is_min_cost(lq):
    assert np.all(f_hat(lq[1], 0.0, np.zeros((3, 1))) == 0.0)


def test_best_response_fields(lq, small_noise):
    model, spec = lq
    st = simulate_state_p0(model, small_noise)
    n, N, C, _ = small_noise.increments.shape
    y = np.zeros((n, N + 1))
    assert np.all(best_response(spec, st, y, np.zeros((n, N, C, 1))) == 0.0)
    assert np.all(best_response(spec, st, y, np.ones((n, N, C, 1))) == 1.0)
    two = np.broadcast_to(np.where(np.arange(C) < C // 2, 0.0, 2.0)[None, None, :, None], (n, N, C, 1))
    a = best_response(spec, st, y, two)
    assert set(np.unique(a)) == {0.0, 2.0}


def test_zero_cost_constant_payment_is_exact(small_noise, bm):
    st = simulate_state_p0(bm, small_noise)
    v = agent_value(bm, np.full(st.n_paths, 1.5), np.zeros(small_noise.increments.shape[:3]), st)
    assert v.value == 1.5 and v.se == 0.0


def test_discount_paths(small_noise, bm):
    st = simulate_state_p0(bm, small_noise)
    assert np.all(discount_path(bm, st).K == 1.0)
    tg = small_noise.tg
    K = discount_path(replace(bm, k_disc=constant_rate(0.3)), st).K
    np.testing.assert_allclose(K[0], np.exp(-0.3 * tg.times), atol=1e-12)
    K = discount_path(replace(bm, k_disc=constant_rate(-1.0)), st).K
    assert abs(K[0, -1] - oracles.NEG_RATE_K_T) < 1e-12


def _lq_contract(lq, n=10000, seed=3):
    model, spec = lq
    noise = simulate_base_measure(build_intensity_grid(16), TimeGrid(1.0, 50), 1, n, seed)
    return model, spec, noise


def test_best_response_and_lazy_values(lq):
    model, spec, noise = _lq_contract(lq)
    best = simulate_agent_response(model, spec, 0.0, constant_z(1.0), LPolicy(), noise, lambda t, x, y, a: a)
    sb = agent_states(best)
    v = agent_value(model, best.xi, sb.actions, sb)
    assert within(v.value, v.se, 0.0)
    lazy = simulate_agent_response(model, spec, 0.0, constant_z(1.0), LPolicy(), noise, lambda t, x, y, a: 0 * a)
    sl = agent_states(lazy)
    vl = agent_value(model, lazy.xi, sl.actions, sl)
    assert within(vl.value, vl.se, oracles.LQ_LAZY_VALUE)
    probes = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    assert verify_supermartingale_R(model, best.y_path, sb.actions, sb, probes).all_zero()
    rep = verify_supermartingale_R(model, lazy.y_path, sl.actions, sl, probes)
    assert rep.negative()
    assert np.all(np.abs(rep.drift - oracles.LQ_LAZY_R_DRIFT) <= 3 * rep.se + 1e-9)


def test_zero_incentive_drift_is_non_positive(lq):
    model, spec, noise = _lq_contract(lq, n=2000)
    states = simulate_state_p0(model, noise)
    bundle = generate_contract(model, spec, 0.0, constant_z(0.0), LPolicy(), states)
    for c in (0.0, 1.0, -2.0):
        b = simulate_agent_response(model, spec, 0.0, constant_z(0.0), LPolicy(), noise, lambda t, x, y, a: 0 * a + c)
        s = agent_states(b)
        assert verify_supermartingale_R(model, b.y_path, s.actions, s, [0.0, 0.5, 1.0]).non_positive()
    assert np.all(bundle.xi == 0.0)
