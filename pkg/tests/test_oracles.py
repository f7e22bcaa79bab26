import math

import numpy as np

from tests import oracles


def test_lq_principal_optimum_by_grid_search():
    z = np.linspace(0.0, 2.0, 200001)
    v = z * oracles.T - oracles.T * z**2 / 2
    assert abs(z[np.argmax(v)] - oracles.LQ_Z_STAR) < 1e-4
    assert abs(v.max() - oracles.LQ_V_STAR) < 1e-9


def test_lq_hamiltonian_by_grid_search():
    u = np.linspace(-2.0, 2.0, 400001)
    for z, h in ((1.0, oracles.LQ_H_AT_1), (3.0, oracles.LQ_H_AT_3)):
        vals = u * z - u**2 / 2
        assert abs(vals.max() - h) < 1e-9
    assert u[np.argmax(u * 3.0 - u**2 / 2)] == oracles.LQ_U_AT_3


def test_linear_bsde_by_backward_euler():
    n = 100000
    dt = oracles.T / n
    y = 1.0
    for _ in range(n):
        y = y / (1 + oracles.LINEAR_R * dt)
    assert abs(y - oracles.LINEAR_Y0) < 1e-5


def test_two_point_and_lazy_constants():
    atoms = np.array([0.0, 2.0])
    assert np.mean(-(atoms**2) / 2) * oracles.T == oracles.TWO_POINT_Y_DRIFT
    assert -oracles.T * 1.0**2 / 2 == oracles.LQ_LAZY_VALUE == oracles.LQ_LAZY_R_DRIFT
    assert abs(math.exp(1.0) - oracles.NEG_RATE_K_T) < 1e-15
