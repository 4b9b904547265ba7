"""Ground-state solvers: total energy, Hamiltonian, SCF loop, multipliers.

Self-consistency iterates density -> Hamiltonian -> lowest orbitals ->
density with linear or Anderson mixing.  The eigensolve is warm-started
from the previous iteration and runs at a tolerance slaved to the current
density residual.  Convergence is declared only once the orbitals are
stationary for the Hamiltonian built from their *own* density (residual
below eig_tol), not merely when the mixed density stops moving; the mixed
iteration keeps running until that holds.  Re-solving at the bare output
density instead would diverge here, for the same reason unmixed
self-consistency iterations diverge.

Every density-dependent integral (energy, Hamiltonian weight, Hessian
weights elsewhere) uses one and the same quadrature rule, which keeps the
discrete energy an exact function of the coefficients; SCF and direct
minimization then agree to solver tolerance rather than quadrature noise.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .fem import (
    DensityField,
    FeSpace,
    assemble_weighted_mass,
    basis_values,
    density_from_orbitals,
    full_node_values,
    mass_matrix,
    stiffness_matrix,
)
from .mesh import build_uniform_mesh
from .physics import solve_hartree
from .sparse import RankUpdate, cg_solve, lobpcg_solve, make_jacobi

logger = logging.getLogger(__name__)


@dataclass
class OrbitalSet:
    """N orbital coefficient columns, M-orthonormal.

    coeffs has shape (n_dofs, N); column i is orbital phi_i.
    """

    space: object
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.ndim != 2 or self.coeffs.shape[0] != self.space.n_dofs:
            raise ValueError(
                f"orbital block shape {self.coeffs.shape} does not match "
                f"n_dofs {self.space.n_dofs}"
            )

    @property
    def n(self):
        return self.coeffs.shape[1]

    def gram(self):
        return self.coeffs.T @ (mass_matrix(self.space) @ self.coeffs)

    def drift(self):
        """Deviation from orthonormality, max |Gram - I|."""
        g = self.gram()
        return float(np.max(np.abs(g - np.eye(self.n))))


def orthonormalize(space, block):
    """Modified Gram-Schmidt in the mass inner product; span preserved."""
    c = np.array(getattr(block, "coeffs", block), dtype=float)
    if c.ndim == 1:
        c = c[:, None]
    m = mass_matrix(space)
    scale = np.sqrt(np.einsum("ij,ij->j", c, m @ c))
    for i in range(c.shape[1]):
        v = c[:, i]
        for _ in range(2):
            for j in range(i):
                v -= (c[:, j] @ (m @ v)) * c[:, j]
        nrm = np.sqrt(max(v @ (m @ v), 0.0))
        if nrm < 1e-12 * max(scale[i], 1e-300):
            raise ValueError(f"column {i} is M-linearly dependent on earlier columns")
        c[:, i] = v / nrm
    return OrbitalSet(space, c)


def _energy_terms(system, orbitals, rho=None, hartree=None):
    space = orbitals.space
    c = orbitals.coeffs
    drift = orbitals.drift()
    if drift > 1e-8:
        logger.warning("orbital orthonormality drift %.2e in energy evaluation", drift)
    if rho is None:
        rho = density_from_orbitals(space, c)
    rw = rho.rule.weights
    _, vols = space.geometry()
    terms = {}
    terms["kinetic"] = 0.5 * float(np.einsum("ij,ij->", c, stiffness_matrix(space) @ c))
    terms["local"] = float(
        np.einsum("e,q,eq,eq->", vols, rw, system.potential_table(space), rho.values)
    )
    z = system.projector_block(space)
    terms["nonlocal"] = float(np.sum((z.T @ c) ** 2)) if z.shape[1] else 0.0
    if system.use_hartree:
        if hartree is None:
            hartree = solve_hartree(space, rho, system.boundary_rule)
        terms["hartree"] = hartree.energy
    else:
        terms["hartree"] = 0.0
    terms["xc"] = float(np.einsum("e,q,eq->", vols, rw, system.xc.e(rho.values)))
    total = sum(terms.values())
    return total, terms, rho, hartree


def energy(system, orbitals):
    """Total energy E(Phi): kinetic + local + nonlocal + Hartree + xc."""
    total, _, _, _ = _energy_terms(system, orbitals)
    return total


def assemble_hamiltonian(system, rho, hartree=None):
    """Kohn-Sham operator at density rho: (sparse part, projector block).

    The sparse part is K/2 plus the weighted mass of the local effective
    potential; the full operator adds the rank-M_proj term Z Z^T.  A
    HartreeSolution already computed for this same rho may be passed to
    avoid resolving the Poisson problem.
    """
    space = rho.space
    if rho.rule.order != space.quad_nl.order:
        raise ValueError("density must live on the space's nonlinear rule")
    v = system.potential_table(space).copy()
    if system.use_hartree:
        if hartree is None:
            hartree = solve_hartree(space, rho, system.boundary_rule)
        v += hartree.effective
    if system.xc.kind != "none":
        v += system.xc.de(rho.values)
    a = 0.5 * stiffness_matrix(space) + assemble_weighted_mass(space, v, rule=rho.rule)
    z = system.projector_block(space)
    return a, (z if z.shape[1] else None)


def hamiltonian_operator(a, z):
    return a if z is None else RankUpdate(a, z)


def lagrange_multipliers(system, orbitals):
    """Lambda_ij = phi_j^T A_Phi phi_i at the orbitals' own density."""
    c = orbitals.coeffs
    a, z = assemble_hamiltonian(system, density_from_orbitals(orbitals.space, c))
    return c.T @ (hamiltonian_operator(a, z) @ c)


@dataclass
class ScfConfig:
    mixing: str = "anderson"
    beta: float = 0.5
    anderson_depth: int = 5
    density_tol: float = 1e-8
    max_iter: int = 60
    eig_tol: float = 1e-9
    initial_guess: str = "atomic-gaussian"
    seed: int = 0
    dof_fraction: float = 0.2
    initial_orbitals: object = None
    dense_cutoff: int = 400
    eig_maxiter: int = 400

    def __post_init__(self):
        if self.mixing not in ("linear", "anderson"):
            raise ValueError(f"unknown mixing scheme {self.mixing!r}")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("mixing beta must lie in (0, 1]")
        if self.density_tol <= 0.0 or self.eig_tol <= 0.0:
            raise ValueError("tolerances must be positive")
        if self.initial_guess not in ("atomic-gaussian", "random"):
            raise ValueError(f"unknown initial guess {self.initial_guess!r}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class GroundState:
    orbitals: OrbitalSet
    multipliers: np.ndarray
    eigenvalues: np.ndarray
    total_energy: float
    scf_history: list
    converged: bool
    eig_residual: float = np.nan
    aux_eigenvalues: np.ndarray = None


def _monomial_powers(count):
    """First `count` exponent triples ordered by total degree."""
    out = []
    deg = 0
    while len(out) < count:
        for i in range(deg, -1, -1):
            for j in range(deg - i, -1, -1):
                out.append((i, j, deg - i - j))
                if len(out) == count:
                    return out
        deg += 1
    return out


def guess_block(system, space, ncol, kind="atomic-gaussian", seed=0):
    """Deterministic starting orbitals: Gaussians times low-order monomials."""
    if kind == "random":
        rng = np.random.default_rng(seed)
        return orthonormalize(space, rng.standard_normal((space.n_dofs, ncol)))
    if system.pseudo.nuclei:
        centers = [(np.asarray(n.position, dtype=float), n.core_radius)
                   for n in system.pseudo.nuclei]
    else:
        centers = [(np.zeros(3), 1.0)]
    powers = _monomial_powers((ncol + len(centers) - 1) // len(centers))
    x = space.dof_coords
    cols = []
    for i in range(ncol):
        center, sigma = centers[i % len(centers)]
        px, py, pz = powers[i // len(centers)]
        d = x - center[None, :]
        g = np.exp(-np.einsum("pk,pk->p", d, d) / (2.0 * sigma**2))
        cols.append(d[:, 0] ** px * d[:, 1] ** py * d[:, 2] ** pz * g)
    return orthonormalize(space, np.column_stack(cols))


class _DensityRep:
    """Loss-free compact coordinates for densities during mixing.

    A density of P1 orbitals is piecewise quadratic and continuous, hence
    exactly a P2 finite element function; its P2 nodal values are a faithful
    representation roughly 20x smaller than the quadrature arrays, which is
    what keeps Anderson history affordable on the fine reference meshes.
    Densities of P2 orbitals are quartic per element and have no such space
    here, so they stay in quadrature coordinates (their meshes are much
    smaller in practice).  Either way the represented function is the exact
    orbital density, so no fixed point moves.
    """

    def __init__(self, space):
        self.space = space
        self.shape = (space.mesh.n_tets, space.quad_nl.n_points)
        if space.degree == 1:
            self.aux = FeSpace(space.mesh, 2)
            self.basis = basis_values(2, space.quad_nl.points)
        else:
            self.aux = None

    def from_orbitals(self, coeffs, rho):
        """Mixing vector for the density of the given orbital block."""
        if self.aux is None:
            return rho.values.ravel().copy()
        vals = full_node_values(self.space, coeffs)
        mid = 0.5 * (vals[self.aux.edges[:, 0]] + vals[self.aux.edges[:, 1]])
        nodal = np.vstack([vals, mid])
        return np.einsum("nm,nm->n", nodal, nodal)

    def to_quad(self, vec):
        """Quadrature values of the represented density, clipped to >= 0."""
        if self.aux is None:
            vals = vec.reshape(self.shape)
        else:
            vals = np.einsum("ea,qa->eq", vec[self.aux.element_node_map], self.basis)
        return np.maximum(vals, 0.0)


class _Mixer:
    """Linear or Anderson mixing acting on flattened density arrays."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.x_hist = []
        self.f_hist = []

    def step(self, x, f):
        beta = self.cfg.beta
        if self.cfg.mixing == "linear":
            return x + beta * f
        self.x_hist.append(x)
        self.f_hist.append(f)
        depth = self.cfg.anderson_depth
        if len(self.x_hist) > depth + 1:
            self.x_hist.pop(0)
            self.f_hist.pop(0)
        k = len(self.x_hist) - 1
        if k == 0:
            return x + beta * f
        dx = np.stack([self.x_hist[-1] - self.x_hist[i] for i in range(k)], axis=1)
        df = np.stack([self.f_hist[-1] - self.f_hist[i] for i in range(k)], axis=1)
        gamma, *_ = np.linalg.lstsq(df, f, rcond=None)
        return x + beta * f - (dx + beta * df) @ gamma


def _eig_residual(op, m, c, lam):
    r = op @ c - (m @ c) @ lam
    scale = 1.0 + np.abs(np.diag(lam))
    return float(np.max(np.linalg.norm(r, axis=0) / scale))


def scf_solve(system, space, cfg=None):
    """Self-consistent ground state of the system on the given space."""
    cfg = cfg if cfg is not None else ScfConfig()
    n_el = system.n_electrons
    if n_el > cfg.dof_fraction * space.n_dofs:
        raise ValueError(
            f"{n_el} orbitals on {space.n_dofs} dofs exceeds the configured "
            f"fraction {cfg.dof_fraction}"
        )
    m = mass_matrix(space)
    nev = n_el + 2
    if cfg.initial_orbitals is not None:
        start = orthonormalize(space, cfg.initial_orbitals)
        if start.coeffs.shape[1] >= nev:
            warm = start.coeffs[:, :nev]
        else:
            extra = guess_block(system, space, nev, cfg.initial_guess, cfg.seed)
            block = np.hstack(
                [start.coeffs, extra.coeffs[:, : nev - start.coeffs.shape[1]]]
            )
            warm = orthonormalize(space, block).coeffs
    else:
        warm = guess_block(system, space, nev, cfg.initial_guess, cfg.seed).coeffs
    phi = OrbitalSet(space, warm[:, :n_el])
    _, vols = space.geometry()
    wq_rule = space.quad_nl.weights

    mixer = _Mixer(cfg)
    rep = _DensityRep(space) if system.nonlinear else None
    if rep is not None and rep.aux is not None:
        x = rep.from_orbitals(phi.coeffs, None)
        rho = DensityField(space, rep.to_quad(x))
    else:
        rho = density_from_orbitals(space, phi.coeffs)
        x = rep.from_orbitals(phi.coeffs, rho) if rep is not None else None
    history = []
    converged = False
    res = np.inf
    theta = None
    eig_res = np.inf
    rho_out = rho
    hartree_out = None
    a_sc = z_sc = None    # Hamiltonian at the orbitals' own density, when fresh
    for it in range(1, cfg.max_iter + 1):
        a, z = assemble_hamiltonian(system, rho)
        op = hamiltonian_operator(a, z)
        if system.nonlinear:
            # solve tighter than the density we still expect to move; the
            # final self-consistency check needs inner solves well below
            # eig_tol, since the density error feeds back into the residual
            tol_it = min(1e-3, max(1e-2 * res, 5e-14))
        else:
            tol_it = cfg.eig_tol
        eig = lobpcg_solve(
            op, m, warm, tol=tol_it, maxiter=cfg.eig_maxiter,
            precond=make_jacobi(op), dense_cutoff=cfg.dense_cutoff,
        )
        if not eig.converged:
            raise RuntimeError(
                f"eigensolver stalled at SCF iteration {it}: "
                f"max residual {eig.residuals.max():.2e}"
            )
        warm = eig.vectors
        theta = eig.values
        phi = OrbitalSet(space, eig.vectors[:, :n_el])
        if rep is not None and rep.aux is not None:
            x_out = rep.from_orbitals(phi.coeffs, None)
            rho_out = DensityField(space, rep.to_quad(x_out))
        else:
            rho_out = density_from_orbitals(space, phi.coeffs)
            x_out = rep.from_orbitals(phi.coeffs, rho_out) if rep is not None else None
        res = float(
            np.sqrt(
                np.einsum("e,q,eq->", vols, wq_rule, (rho_out.values - rho.values) ** 2)
            )
        )
        e_tot, _, _, hartree_out = _energy_terms(system, phi, rho=rho_out)
        history.append((it, res, e_tot))
        logger.debug("scf %3d  res %.3e  E % .10f", it, res, e_tot)
        if not system.nonlinear:
            # the density-to-Hamiltonian map is constant: one pass is exact
            rho = rho_out
            a_sc, z_sc = a, z
            eig_res = float(np.max(eig.residuals))
            converged = eig_res <= cfg.eig_tol
            break
        if res <= cfg.density_tol:
            a_sc, z_sc = assemble_hamiltonian(system, rho_out, hartree=hartree_out)
            op_sc = hamiltonian_operator(a_sc, z_sc)
            lam = phi.coeffs.T @ (op_sc @ phi.coeffs)
            eig_res = _eig_residual(op_sc, m, phi.coeffs, lam)
            if eig_res <= cfg.eig_tol:
                rho = rho_out
                converged = True
                break
        x = mixer.step(x, x_out - x)
        rho = DensityField(space, rep.to_quad(x))

    gap = abs(theta[n_el] - theta[n_el - 1])
    if gap < 1e-8 * max(1.0, abs(theta[n_el - 1])):
        raise RuntimeError(
            f"degenerate level at the occupation edge: eigenvalues "
            f"{theta[n_el - 1]:.10f} and {theta[n_el]:.10f}; integer occupation "
            "is ill-defined here"
        )
    if not converged:
        # phi's own density is rho_out from its defining iteration
        a_sc, z_sc = assemble_hamiltonian(system, rho_out, hartree=hartree_out)
    op_sc = hamiltonian_operator(a_sc, z_sc)
    lam = phi.coeffs.T @ (op_sc @ phi.coeffs)
    eig_res = _eig_residual(op_sc, m, phi.coeffs, lam)
    converged = converged and eig_res <= cfg.eig_tol
    return GroundState(
        orbitals=phi,
        multipliers=lam,
        eigenvalues=np.linalg.eigvalsh(lam),
        total_energy=e_tot,
        scf_history=history,
        converged=converged,
        eig_residual=eig_res,
        aux_eigenvalues=theta.copy(),
    )


def direct_minimize(system, space, phi0=None, step0=1.0, shrink=0.5,
                    armijo=1e-4, tol=1e-6, max_iter=5000):
    """Riemannian gradient descent on the M-orthonormality manifold.

    The descent direction is the M-Riesz representative of the energy
    differential, projected onto the tangent space; steps are accepted by an
    Armijo test and retracted by Gram-Schmidt.  Stops when the projected
    gradient M-norm drops below tol.
    """
    if phi0 is None:
        phi = guess_block(system, space, system.n_electrons)
    else:
        phi = orthonormalize(space, phi0)
    m = mass_matrix(space)
    mprec = make_jacobi(m)
    c = phi.coeffs
    e_cur, _, _, _ = _energy_terms(system, OrbitalSet(space, c))
    history = []
    converged = False
    step = step0
    for it in range(1, max_iter + 1):
        a, z = assemble_hamiltonian(system, density_from_orbitals(space, c))
        g_dual = 2.0 * (hamiltonian_operator(a, z) @ c)
        r = np.empty_like(c)
        for j in range(c.shape[1]):
            r[:, j], info = cg_solve(m, g_dual[:, j], tol=1e-12, precond=mprec)
            if not info.converged:
                raise RuntimeError("mass solve failed in gradient computation")
        p = r - c @ (c.T @ (m @ r))
        gnorm2 = float(np.einsum("ij,ij->", p, m @ p))
        gnorm = np.sqrt(max(gnorm2, 0.0))
        history.append((it, gnorm, e_cur))
        if gnorm <= tol:
            converged = True
            break
        accepted = False
        t = step
        for _ in range(40):
            cand = orthonormalize(space, c - t * p).coeffs
            e_new, _, _, _ = _energy_terms(system, OrbitalSet(space, cand))
            if e_new <= e_cur - armijo * t * gnorm2:
                accepted = True
                break
            t *= shrink
        if not accepted:
            if armijo * step * gnorm2 <= 256.0 * np.finfo(float).eps * max(
                1.0, abs(e_cur)
            ):
                # the decrease the test asks for is smaller than the noise in
                # the energy evaluation itself; nothing left to gain here
                logger.info(
                    "descent reached the energy roundoff floor at iteration "
                    "%d (gradient norm %.3e)", it, gnorm,
                )
                break
            raise RuntimeError(
                f"line search failed after 40 halvings at iteration {it} "
                f"(gradient norm {gnorm:.3e})"
            )
        c = cand
        e_cur = e_new
        step = min(step0, 2.0 * t)

    phi = OrbitalSet(space, c)
    lam = lagrange_multipliers(system, phi)
    return GroundState(
        orbitals=phi,
        multipliers=lam,
        eigenvalues=np.linalg.eigvalsh(lam),
        total_energy=e_cur,
        scf_history=history,
        converged=converged,
    )


# -- serialization ---------------------------------------------------------

_STATE_VERSION = 1


def save_ground_state(gs, path):
    """Write a GroundState as plain JSON (coefficients included)."""
    space = gs.orbitals.space
    payload = {
        "format": "ksfem-ground-state",
        "version": _STATE_VERSION,
        "mesh": {"L": space.mesh.L, "n": space.mesh.n, "degree": space.degree},
        "coeffs": gs.orbitals.coeffs.tolist(),
        "multipliers": np.asarray(gs.multipliers).tolist(),
        "eigenvalues": np.asarray(gs.eigenvalues).tolist(),
        "total_energy": gs.total_energy,
        "scf_history": [list(row) for row in gs.scf_history],
        "converged": bool(gs.converged),
        "eig_residual": None if np.isnan(gs.eig_residual) else gs.eig_residual,
        "aux_eigenvalues": None if gs.aux_eigenvalues is None
        else np.asarray(gs.aux_eigenvalues).tolist(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_ground_state(path, space=None):
    """Read a GroundState written by save_ground_state.

    When space is omitted, the mesh and space are rebuilt from the stored
    metadata.
    """
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != "ksfem-ground-state" or payload.get("version") != _STATE_VERSION:
        raise ValueError(f"not a recognized ground-state file: {path}")
    meta = payload["mesh"]
    if space is None:
        space = FeSpace(build_uniform_mesh(meta["L"], meta["n"]), meta["degree"])
    elif (space.mesh.L, space.mesh.n, space.degree) != (meta["L"], meta["n"], meta["degree"]):
        raise ValueError("stored ground state was computed on a different space")
    aux = payload.get("aux_eigenvalues")
    res = payload.get("eig_residual")
    return GroundState(
        orbitals=OrbitalSet(space, np.asarray(payload["coeffs"], dtype=float)),
        multipliers=np.asarray(payload["multipliers"], dtype=float),
        eigenvalues=np.asarray(payload["eigenvalues"], dtype=float),
        total_energy=float(payload["total_energy"]),
        scf_history=[tuple(row) for row in payload["scf_history"]],
        converged=bool(payload["converged"]),
        eig_residual=np.nan if res is None else float(res),
        aux_eigenvalues=None if aux is None else np.asarray(aux, dtype=float),
    )
