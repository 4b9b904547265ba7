"""Eigenvalue convergence for the harmonic well, against the exact answer.

The confined oscillator with V = r^2/2 has ground level 3/2 up to an
exponentially small box correction, so every mesh in the ladder can be
measured against the same number and no reference solve is needed.
Linear elements should lose accuracy like h^2.
"""

import time

import numpy as np

from ksfem import FeSpace, ScfConfig, build_uniform_mesh, fit_slope, make_system, scf_solve

LEVELS = (4, 6, 8, 12)
EXACT = 1.5

system = make_system("harmonic")
cfg = ScfConfig(density_tol=1e-10, eig_tol=1e-10, seed=0)

hs, errs = [], []
print("   n      h        dofs     lambda_1      error      seconds")
for n in LEVELS:
    t0 = time.perf_counter()
    space = FeSpace(build_uniform_mesh(system.L, n), 1)
    gs = scf_solve(system, space, cfg)
    dt = time.perf_counter() - t0
    lam = gs.eigenvalues[0]
    h = space.mesh.h
    hs.append(h)
    errs.append(abs(lam - EXACT))
    print(
        "  %2d   %6.3f  %8d   %10.6f   %.3e   %6.1f"
        % (n, h, space.n_dofs, lam, errs[-1], dt)
    )

slope, used = fit_slope(np.array(hs), np.array(errs), 0.0)
print()
print("observed rate: %.3f over %d levels (expected 2 for linear elements)" % (slope, used))

# consecutive pairs tell the same story without the least-squares smoothing
for (h0, e0), (h1, e1) in zip(zip(hs, errs), zip(hs[1:], errs[1:])):
    print("  pairwise %4.2f -> %4.2f : %.3f" % (h0, h1, np.log(e0 / e1) / np.log(h0 / h1)))
