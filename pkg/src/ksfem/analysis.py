"""Verification harness: alignment, second-order audits, convergence rates.

Ground states are at best unique up to an orthogonal mixing of the occupied
orbitals, so every comparison here first solves the Procrustes problem
min_U ||Psi U - Phi||.  Inter-mesh errors are computed by evaluating the
coarse solution at the reference mesh's quadrature points through structured
point location, which avoids any interpolation operator.

The second-order form audited here acts on tangent blocks Psi:

    <L' Psi, Gamma> = sum_i (A_rho psi_i, gamma_i) - sum_ij Lambda_ij (psi_j, gamma_i)
                      + 2 int E''(rho) (sum_j phi_j psi_j)(sum_i phi_i gamma_i)
                      + 2 D(sum_j phi_j psi_j, sum_i phi_i gamma_i)

and its smallest eigenvalue on a finite tangent subspace is reported as the
inf-sup estimate.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .fem import (
    FeSpace,
    assemble_weighted_mass,
    density_from_orbitals,
    evaluate_at_points,
    full_node_values,
    mass_matrix,
    quad_gradients,
    quad_values,
    stiffness_matrix,
)
from .ksdft import (
    OrbitalSet,
    ScfConfig,
    assemble_hamiltonian,
    hamiltonian_operator,
    scf_solve,
)
from .mesh import build_uniform_mesh
from .physics import hartree_field
from .sparse import cg_solve, lobpcg_solve, make_jacobi

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("h", "dofs", "energy_err", "ev1_err", "ev2_err", "h1_err", "l2_err")
SLOPE_COLUMNS = ("energy_err", "ev1_err", "ev2_err", "h1_err", "l2_err")


# -- alignment -------------------------------------------------------------


@dataclass
class Alignment:
    u: np.ndarray
    aligned_distance_l2: float
    aligned_distance_h1: float
    degenerate: bool = False


def _svd_orthogonal(overlap):
    p, s, qt = np.linalg.svd(overlap)
    return p @ qt, bool(s.min(initial=np.inf) < 1e-8)


def procrustes_align(phi, psi):
    """Best orthogonal U for min ||Psi U - Phi||_0, with post-fit distances.

    phi is the anchor.  For two orbital sets on one space the overlap and
    distances are exact matrix expressions; across spaces psi is evaluated
    at phi's quadrature points.
    """
    if phi.n != psi.n:
        raise ValueError("orbital counts differ")
    if phi.space is psi.space:
        space = phi.space
        m = mass_matrix(space)
        k = stiffness_matrix(space)
        overlap = psi.coeffs.T @ (m @ phi.coeffs)
        u, degenerate = _svd_orthogonal(overlap)
        d = psi.coeffs @ u - phi.coeffs
        l2sq = float(np.einsum("ij,ij->", d, m @ d))
        h1sq = l2sq + float(np.einsum("ij,ij->", d, k @ d))
        return Alignment(u, np.sqrt(max(l2sq, 0.0)), np.sqrt(max(h1sq, 0.0)), degenerate)
    overlap, _ = _cross_accumulate(phi, psi, u=None)
    u, degenerate = _svd_orthogonal(overlap)
    _, errs = _cross_accumulate(phi, psi, u=u)
    return Alignment(u, errs[0], errs[1], degenerate)


def _element_chunks(n_els, per_chunk=8192):
    for e0 in range(0, n_els, per_chunk):
        yield e0, min(e0 + per_chunk, n_els)


def _cross_accumulate(phi, psi, u=None):
    """Overlap (u None) or aligned L2/H1 errors (u given), psi on phi's mesh."""
    ref, coarse = phi.space, psi.space
    rule = ref.quad_nl
    full_ref = full_node_values(ref, phi.coeffs)
    bref, dref = ref.tables(rule)
    g_ref, vols = ref.geometry()
    overlap = np.zeros((psi.n, phi.n))
    l2sq = 0.0
    h1sq = 0.0
    for e0, e1 in _element_chunks(ref.mesh.n_tets):
        verts = ref.mesh.vertices[ref.mesh.tets[e0:e1]]
        pts = np.einsum("qa,eak->eqk", rule.points, verts).reshape(-1, 3)
        w = (vols[e0:e1, None] * rule.weights[None, :]).ravel()
        gathered = full_ref[ref.element_node_map[e0:e1]]
        pvals = np.einsum("eam,qa->eqm", gathered, bref).reshape(-1, phi.n)
        if u is None:
            cvals = evaluate_at_points(coarse, psi.coeffs, pts)
            overlap += np.einsum("p,pm,pn->mn", w, cvals, pvals)
            continue
        cvals, cgrads = evaluate_at_points(coarse, psi.coeffs, pts, grad=True)
        d = cvals @ u - pvals
        l2sq += float(np.einsum("p,pm,pm->", w, d, d))
        pgrads = np.einsum("eam,qac,eck->eqmk", gathered, dref, g_ref[e0:e1])
        dg = np.einsum("pmk,mn->pnk", cgrads, u) - pgrads.reshape(-1, phi.n, 3)
        h1sq += float(np.einsum("p,pmk,pmk->", w, dg, dg))
    if u is None:
        return overlap, None
    return None, (np.sqrt(max(l2sq, 0.0)), np.sqrt(max(l2sq + h1sq, 0.0)))


# -- tangent decomposition -------------------------------------------------


@dataclass
class TangentSplit:
    s: np.ndarray
    w: np.ndarray


def tangent_split(phi, psi):
    """Represent an aligned psi as phi + S phi + W with W tangent at phi."""
    if phi.space is not psi.space:
        raise ValueError("both orbital sets must live on one space")
    space = phi.space
    m = mass_matrix(space)
    d = psi.coeffs - phi.coeffs
    dist = np.sqrt(float(np.einsum("ij,ij->", d, m @ d)))
    if dist >= 1.0:
        raise ValueError(
            f"orbital sets are too far apart for the tangent expansion "
            f"(distance {dist:.3f} >= 1)"
        )
    g = phi.coeffs.T @ (m @ psi.coeffs)
    s = 0.5 * (g + g.T) - np.eye(phi.n)
    w = psi.coeffs - phi.coeffs @ g
    return TangentSplit(s, w)


# -- second-order operator -------------------------------------------------


def _hessian_context(system, gs):
    ctx = getattr(gs, "_hessian_ctx", None)
    if ctx is None:
        space = gs.orbitals.space
        rho = density_from_orbitals(space, gs.orbitals.coeffs)
        a, z = assemble_hamiltonian(system, rho)
        ctx = {
            "op": hamiltonian_operator(a, z),
            "m": mass_matrix(space),
            "phi_q": quad_values(space, gs.orbitals.coeffs),
            "e2": system.xc.d2e(rho.values) if system.xc.kind != "none" else None,
            "mprec": make_jacobi(mass_matrix(space)),
        }
        gs._hessian_ctx = ctx
    return ctx


def hessian_apply(system, gs, psi, dual=False):
    """Action of the second-order form on a tangent block.

    Returns the M-Riesz representative projected back to the tangent space,
    or the raw dual block when dual=True.  <L' Psi, Gamma> for tangent Gamma
    equals sum(Gamma * dual).
    """
    space = gs.orbitals.space
    c = gs.orbitals.coeffs
    p = np.asarray(getattr(psi, "coeffs", psi), dtype=float)
    ctx = _hessian_context(system, gs)
    m = ctx["m"]
    tangency = float(np.max(np.abs(c.T @ (m @ p))))
    if tangency > 1e-8:
        raise ValueError(f"block is not tangent at the orbitals: |Phi^T M Psi| = {tangency:.2e}")

    out = ctx["op"] @ p - (m @ p) @ gs.multipliers
    psi_q = quad_values(space, p)
    u = np.einsum("eqm,eqm->eq", ctx["phi_q"], psi_q)
    field = None
    if ctx["e2"] is not None:
        field = 2.0 * ctx["e2"] * u
    if system.use_hartree:
        eff, _, _, _ = hartree_field(space, u)
        field = 2.0 * eff if field is None else field + 2.0 * eff
    if field is not None:
        out += assemble_weighted_mass(space, field) @ c
    if dual:
        return out
    riesz = np.empty_like(out)
    for j in range(out.shape[1]):
        riesz[:, j], info = cg_solve(m, out[:, j], tol=1e-12, precond=ctx["mprec"])
        if not info.converged:
            raise RuntimeError("mass solve failed in the Riesz map")
    return riesz - c @ (c.T @ (m @ riesz))


@dataclass
class InfsupReport:
    gamma: float
    smallest_eigenvalues: np.ndarray
    subspace_dim: int
    positive: bool


def infsup_audit(system, gs, subspace_dim):
    """Smallest eigenvalue of the second-order form on a tangent subspace.

    The subspace is spanned by placing each of the next `subspace_dim`
    unoccupied eigenvectors into each occupied slot, an M-orthonormal basis
    of dimension N * subspace_dim.
    """
    if subspace_dim < 1:
        raise ValueError("subspace_dim must be at least 1")
    space = gs.orbitals.space
    n_el = gs.orbitals.n
    ctx = _hessian_context(system, gs)
    op, m = ctx["op"], ctx["m"]
    nev = n_el + subspace_dim
    x0 = np.hstack(
        [
            gs.orbitals.coeffs,
            np.random.default_rng(7).standard_normal((space.n_dofs, subspace_dim)),
        ]
    )
    eig = lobpcg_solve(op, m, x0, tol=1e-9, maxiter=600, precond=make_jacobi(op))
    if not eig.converged:
        raise RuntimeError("eigensolver for the unoccupied directions stalled")
    unocc = eig.vectors[:, n_el:nev]
    # re-orthogonalize against the converged orbitals; the audit basis must
    # be tangent at gs.orbitals, not at the recomputed eigenvectors
    unocc = unocc - gs.orbitals.coeffs @ (gs.orbitals.coeffs.T @ (m @ unocc))
    gram = unocc.T @ (m @ unocc)
    w, v = np.linalg.eigh(gram)
    unocc = unocc @ (v / np.sqrt(w))

    # basis member (k, i) puts unoccupied vector k into occupied slot i;
    # pairing its dual action against member (l, j) gives one matrix entry
    dim = n_el * subspace_dim
    h = np.empty((dim, dim))
    col = 0
    for k in range(subspace_dim):
        for i in range(n_el):
            basis = np.zeros((space.n_dofs, n_el))
            basis[:, i] = unocc[:, k]
            d = hessian_apply(system, gs, basis, dual=True)
            h[:, col] = (unocc.T @ d).ravel()
            col += 1
    h = 0.5 * (h + h.T)
    vals = np.linalg.eigvalsh(h)
    gamma = float(vals[0])
    return InfsupReport(gamma, vals[: min(5, dim)], subspace_dim, gamma > 0.0)


# -- convergence studies ---------------------------------------------------


@dataclass
class LevelRow:
    n: int
    degree: int
    h: float
    dofs: int
    energy_err: float
    ev1_err: float
    ev2_err: float
    h1_err: float
    l2_err: float
    converged: bool


@dataclass
class RateReport:
    rows: list
    slopes: dict
    used: dict
    reference: dict
    gammas: list = None
    aborted: bool = False


class StudyError(RuntimeError):
    """A study level failed to converge; partial results were flagged."""


def fit_slope(hs, errs, ref_h):
    """Least-squares log-log slope with reference-contamination exclusion.

    A preliminary fit estimates the reference's own error at h_ref; levels
    whose error is within a factor 10 of that estimate carry significant
    reference contamination and are dropped (finest first, always keeping at
    least 3 points).
    """
    hs = np.asarray(hs, dtype=float)
    errs = np.asarray(errs, dtype=float)
    good = np.isfinite(errs) & (errs > 0.0)
    hs, errs = hs[good], errs[good]
    if hs.size < 2:
        return np.nan, 0
    slope, intercept = np.polyfit(np.log(hs), np.log(errs), 1)
    used = hs.size
    if hs.size > 3:
        ref_err = np.exp(intercept) * ref_h ** slope
        order = np.argsort(hs)  # ascending: finest first
        keep = np.ones(hs.size, dtype=bool)
        for idx in order:
            if keep.sum() <= 3:
                break
            if errs[idx] <= 10.0 * ref_err:
                keep[idx] = False
        if keep.sum() < hs.size:
            slope, _ = np.polyfit(np.log(hs[keep]), np.log(errs[keep]), 1)
            used = int(keep.sum())
    return float(slope), used


def fit_slopes(rows, ref_h):
    slopes, used = {}, {}
    hs = [r.h for r in rows]
    for col in SLOPE_COLUMNS:
        s, u = fit_slope(hs, [getattr(r, col) for r in rows], ref_h)
        slopes[col] = s
        used[col] = u
    return slopes, used


def convergence_study(system, levels, reference, cfg=None, reference_state=None,
                      csv_path=None, infsup_dim=None):
    """Solve a ladder of meshes against a fine reference and fit error slopes.

    levels is a list of (n, degree); reference is (n_ref, degree_ref) with
    n_ref larger than every study n.  Each level is aligned to the reference
    by the Procrustes rotation before orbital errors are measured.  Raises
    StudyError (after flagging partial CSV output, if requested) when any
    level fails to converge.
    """
    n_ref, deg_ref = reference
    for n, _ in levels:
        if n >= n_ref:
            raise ValueError(f"reference n={n_ref} is not finer than level n={n}")
    cfg = cfg if cfg is not None else ScfConfig()

    if reference_state is None:
        logger.info("solving reference level n=%d p%d", n_ref, deg_ref)
        ref_space = FeSpace(build_uniform_mesh(system.L, n_ref), deg_ref)
        reference_state = scf_solve(system, ref_space, cfg)
    else:
        ref_space = reference_state.orbitals.space
    if not reference_state.converged:
        raise StudyError("reference solve did not converge")
    ref_meta = {
        "n": n_ref,
        "degree": deg_ref,
        "h": ref_space.mesh.h,
        "dofs": ref_space.n_dofs,
        "energy": reference_state.total_energy,
    }

    rows = []
    gammas = [] if infsup_dim else None
    aborted = False
    for n, degree in levels:
        logger.info("solving study level n=%d p%d", n, degree)
        space = FeSpace(build_uniform_mesh(system.L, n), degree)
        gs = scf_solve(system, space, cfg)
        if not gs.converged:
            aborted = True
            rows.append(
                LevelRow(n, degree, space.mesh.h, space.n_dofs,
                         np.nan, np.nan, np.nan, np.nan, np.nan, False)
            )
            break
        align = procrustes_align(reference_state.orbitals, gs.orbitals)
        ev_ref = reference_state.eigenvalues
        ev = gs.eigenvalues
        ev2 = abs(ev[1] - ev_ref[1]) if ev.size > 1 else np.nan
        rows.append(
            LevelRow(
                n, degree, space.mesh.h, space.n_dofs,
                abs(gs.total_energy - reference_state.total_energy),
                abs(ev[0] - ev_ref[0]), ev2,
                align.aligned_distance_h1, align.aligned_distance_l2,
                True,
            )
        )
        if infsup_dim:
            gammas.append(infsup_audit(system, gs, infsup_dim).gamma)

    if aborted:
        report = RateReport(rows, {}, {}, ref_meta, gammas, aborted=True)
        if csv_path is not None:
            write_rate_csv(report, csv_path)
        raise StudyError(
            f"level n={rows[-1].n} p{rows[-1].degree} did not converge; "
            "partial results flagged"
        )

    slopes, used = fit_slopes(rows, ref_meta["h"])
    report = RateReport(rows, slopes, used, ref_meta, gammas)
    if csv_path is not None:
        write_rate_csv(report, csv_path)
    return report


def write_rate_csv(report, path):
    """Emit the per-level error table with slope footer comments."""
    lines = [",".join(CSV_COLUMNS)]
    for r in report.rows:
        lines.append(
            "%.12e,%d,%.12e,%.12e,%.12e,%.12e,%.12e"
            % (r.h, r.dofs, r.energy_err, r.ev1_err, r.ev2_err, r.h1_err, r.l2_err)
        )
    if report.aborted:
        lines.append("# aborted=1")
    for col in SLOPE_COLUMNS:
        if col in report.slopes:
            lines.append("# slope_%s=%.6f" % (col, report.slopes[col]))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def write_gnuplot_script(csv_path, gp_path):
    """Companion log-log plot script for a rates CSV."""
    text = "\n".join(
        [
            "set datafile separator ','",
            "set logscale xy",
            "set key left top",
            "set xlabel 'h'",
            "set ylabel 'error'",
            "plot '%s' using 1:3 with linespoints title 'energy', \\" % csv_path,
            "     '%s' using 1:4 with linespoints title 'ev1', \\" % csv_path,
            "     '%s' using 1:6 with linespoints title 'H1', \\" % csv_path,
            "     '%s' using 1:7 with linespoints title 'L2'" % csv_path,
            "",
        ]
    )
    with open(gp_path, "w") as fh:
        fh.write(text)
