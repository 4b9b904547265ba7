"""Physical and fitted constants (hartree atomic units throughout).

The correlation fit is the unpolarized Perdew-Zunger parameterization of the
Ceperley-Alder electron-gas data, J. P. Perdew and A. Zunger, Phys. Rev. B
23, 5048 (1981), Table XII.  The exchange prefactor is the Dirac/Slater
free-electron constant.
"""

import math

#: Dirac exchange: E_x[rho] = -DIRAC_CX * integral rho^(4/3)
DIRAC_CX = 0.75 * (3.0 / math.pi) ** (1.0 / 3.0)

#: Perdew-Zunger 1981 correlation, unpolarized, high-density side (r_s < 1):
#: eps_c = A ln r_s + B + C r_s ln r_s + D r_s
PZ81_A = 0.0311
PZ81_B = -0.048
PZ81_C = 0.0020
PZ81_D = -0.0116

#: low-density side (r_s >= 1): eps_c = gamma / (1 + beta1 sqrt(r_s) + beta2 r_s)
PZ81_GAMMA = -0.1423
PZ81_BETA1 = 1.0529
PZ81_BETA2 = 0.3334

#: density floor used when evaluating second and third derivatives of the
#: exchange-correlation energy density, which are singular at rho = 0
RHO_FLOOR = 1e-12

#: Coulomb self-energy of a uniform unit cube, integral over the cube pair
#: of 1/|x-y|; used by the direct double-sum oracle to patch the x = y term
CUBE_SELF_ENERGY = 1.88231264

#: default Holder exponent of the LDA exchange derivative bounds
LDA_ALPHA = 1.0 / 3.0
