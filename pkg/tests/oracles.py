"""Frozen reference values with the closed forms they come from.

Each constant is recomputed independently in test_oracles.py (brute-force grid
search or direct quadrature) so a typo here cannot silently pass.
"""

import math

T = 1.0

# LQ principal: value of constant incentive z is V(z) = z T - T z^2 / 2
LQ_Z_STAR = 1.0
LQ_V_STAR = 0.5

# LQ Hamiltonian on |u| <= 2: H(z) = z^2/2 inside, 2|z| - 2 on the boundary
LQ_H_AT_1 = 0.5
LQ_H_AT_3 = 4.0
LQ_U_AT_3 = 2.0

# agent value of the lazy control A = 0 for xi = X_T - T z^2 / 2, z = 1
LQ_LAZY_VALUE = -0.5
# drift per unit time of R under A = 0: -(z^2/2)
LQ_LAZY_R_DRIFT = -0.5

# two-point z {0, 2}: E[Y_T] = Y0 - T * E_m[z^2/2] = Y0 - 1
TWO_POINT_Y_DRIFT = -1.0

# linear BSDE g = -r y, xi = 1: Y_t = exp(-r (T - t))
LINEAR_R = 0.5
LINEAR_Y0 = math.exp(-LINEAR_R * T)

# discount k = -1 over [0, 1]
NEG_RATE_K_T = math.e
