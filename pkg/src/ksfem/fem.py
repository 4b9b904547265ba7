"""P1/P2 Lagrange spaces on tet meshes with homogeneous Dirichlet conditions.

Boundary conditions are imposed by eliminating boundary dofs, so all
assembled matrices are SPD and CG/LOBPCG-friendly.  Assembly is vectorized
over elements; the sparsity pattern and the triplet->CSR scatter map are
cached on the space, which makes the repeated weighted-mass assemblies inside
an SCF loop cheap (one einsum plus one bincount).

Local P2 ordering: four vertex functions lam_a (2 lam_a - 1), then six edge
bubbles 4 lam_a lam_b with (a, b) running over EDGE_PAIRS.
"""

import numpy as np
import scipy.sparse as sp

from .mesh import locate_points, quadrature_rule

EDGE_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))

#: assembly quadrature order per polynomial degree (exact for mass/stiffness)
ASSEMBLY_ORDER = {1: 2, 2: 4}
#: quadrature order for density-dependent (non-polynomial) integrands
NONLINEAR_ORDER = 5


def basis_values(degree, lam):
    """Lagrange basis values at barycentric points lam, shape (npts, nloc)."""
    lam = np.atleast_2d(lam)
    if degree == 1:
        return lam.copy()
    if degree == 2:
        out = np.empty((lam.shape[0], 10))
        out[:, :4] = lam * (2.0 * lam - 1.0)
        for k, (a, b) in enumerate(EDGE_PAIRS):
            out[:, 4 + k] = 4.0 * lam[:, a] * lam[:, b]
        return out
    raise ValueError(f"unsupported degree {degree}")


def basis_grads(degree, lam):
    """d(basis)/d(lam_c) at barycentric points, shape (npts, nloc, 4)."""
    lam = np.atleast_2d(lam)
    npts = lam.shape[0]
    if degree == 1:
        out = np.zeros((npts, 4, 4))
        out[:] = np.eye(4)
        return out
    if degree == 2:
        out = np.zeros((npts, 10, 4))
        for a in range(4):
            out[:, a, a] = 4.0 * lam[:, a] - 1.0
        for k, (a, b) in enumerate(EDGE_PAIRS):
            out[:, 4 + k, a] = 4.0 * lam[:, b]
            out[:, 4 + k, b] = 4.0 * lam[:, a]
        return out
    raise ValueError(f"unsupported degree {degree}")


class FeSpace:
    """P1 or P2 Lagrange space with zero trace on the box boundary.

    Attributes
    ----------
    mesh, degree : the discretization.
    n_dofs : number of free (interior) dofs.
    dof_coords : (n_dofs, 3) coordinates of the free nodes.
    element_dof_map : (n_els, nloc) free-dof index per element node, -1 where
        the node sits on the boundary.
    element_node_map : same shape, but global node ids (no sentinel); node
        numbering is all vertices first, then edge midpoints (P2), edges keyed
        by their sorted vertex pair in lexicographic order.
    """

    def __init__(self, mesh, degree):
        if degree not in (1, 2):
            raise ValueError(f"degree must be 1 or 2, got {degree}")
        self.mesh = mesh
        self.degree = degree
        self.n_loc = 4 if degree == 1 else 10

        nv = mesh.n_vertices
        if degree == 1:
            self.n_nodes = nv
            self.node_coords = mesh.vertices
            self.element_node_map = mesh.tets.copy()
        else:
            pairs = mesh.tets[:, EDGE_PAIRS].reshape(-1, 2)
            pairs = np.sort(pairs, axis=1)
            edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
            self.edges = edges
            self.n_nodes = nv + edges.shape[0]
            mid = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
            self.node_coords = np.vstack([mesh.vertices, mid])
            edge_ids = nv + inverse.reshape(mesh.n_tets, 6)
            self.element_node_map = np.hstack([mesh.tets, edge_ids])

        tol = 1e-10 * mesh.L
        on_bnd = (np.abs(np.abs(self.node_coords) - mesh.L) <= tol).any(axis=1)
        self.boundary_nodes = np.nonzero(on_bnd)[0]
        self.node_to_dof = np.full(self.n_nodes, -1, dtype=np.int64)
        free = np.nonzero(~on_bnd)[0]
        self.node_to_dof[free] = np.arange(free.size)
        self.free_nodes = free
        self.n_dofs = free.size
        self.dof_coords = self.node_coords[free]
        self.element_dof_map = self.node_to_dof[self.element_node_map]

        self.quad = quadrature_rule(ASSEMBLY_ORDER[degree])
        self.quad_nl = quadrature_rule(NONLINEAR_ORDER)

        self._tables = {}
        self._patterns = {}
        self._geom = None
        self._mass = None
        self._stiffness = None

    # -- geometry ----------------------------------------------------------

    def geometry(self):
        """(grad_lambda, volumes): (n_els,4,3) barycentric gradients, (n_els,)."""
        if self._geom is None:
            verts = self.mesh.vertices[self.mesh.tets]
            edges = verts[:, 1:] - verts[:, :1]          # (n_els, 3, 3), rows are edge vectors
            det = np.linalg.det(edges)
            inv = np.linalg.inv(edges)                   # columns of inv are grad lam_1..3
            g = np.empty((self.mesh.n_tets, 4, 3))
            g[:, 1:, :] = np.transpose(inv, (0, 2, 1))
            g[:, 0, :] = -g[:, 1:, :].sum(axis=1)
            self._geom = (g, det / 6.0)
        return self._geom

    def tables(self, rule):
        """Cached (values, grads) of the local basis at the rule's points."""
        key = rule.order
        if key not in self._tables:
            self._tables[key] = (
                basis_values(self.degree, rule.points),
                basis_grads(self.degree, rule.points),
            )
        return self._tables[key]

    def quad_points(self, rule):
        """Physical coordinates of all quadrature points, (n_els, nq, 3).

        Recomputed on every call: at fine resolutions this is the single
        largest array in the code, and the hot paths that need coordinates
        stream over element chunks instead of calling this.
        """
        verts = self.mesh.vertices[self.mesh.tets]
        return np.einsum("qa,eak->eqk", rule.points, verts)

    def quad_weights(self, rule):
        """Physical weights w_q * vol_e as an (n_els, nq) array."""
        _, vols = self.geometry()
        return np.outer(vols, rule.weights)

    # -- assembly ----------------------------------------------------------

    def _pattern(self, constrained):
        """CSR pattern + triplet scatter positions for repeated assembly."""
        if constrained not in self._patterns:
            dofmap = self.element_dof_map if constrained else self.element_node_map
            ndof = self.n_dofs if constrained else self.n_nodes
            nloc = self.n_loc
            rows = np.repeat(dofmap, nloc, axis=1).ravel()
            cols = np.tile(dofmap, (1, nloc)).ravel()
            keep = (rows >= 0) & (cols >= 0)
            rk, ck = rows[keep], cols[keep]
            order = np.lexsort((ck, rk))
            rs, cs = rk[order], ck[order]
            new = np.empty(rs.size, dtype=bool)
            new[0] = True
            new[1:] = (rs[1:] != rs[:-1]) | (cs[1:] != cs[:-1])
            entry = np.cumsum(new) - 1
            nnz = entry[-1] + 1
            indices = cs[new]
            indptr = np.zeros(ndof + 1, dtype=np.int64)
            np.add.at(indptr, rs[new] + 1, 1)
            indptr = np.cumsum(indptr)
            positions = np.empty(rs.size, dtype=np.int64)
            positions[order] = entry
            self._patterns[constrained] = (keep, positions, indices, indptr, nnz, ndof)
        return self._patterns[constrained]

    def _scatter(self, elem_blocks, constrained):
        keep, positions, indices, indptr, nnz, ndof = self._pattern(constrained)
        vals = elem_blocks.reshape(elem_blocks.shape[0], -1).ravel()[keep]
        data = np.bincount(positions, weights=vals, minlength=nnz)
        return sp.csr_matrix((data, indices.copy(), indptr.copy()), shape=(ndof, ndof))


def _mirror_upper(blocks):
    """Copy the upper triangle onto the lower one, in place (bitwise symmetry)."""
    nloc = blocks.shape[1]
    iu = np.triu_indices(nloc, 1)
    blocks[:, iu[1], iu[0]] = blocks[:, iu[0], iu[1]]
    return blocks


def assemble_stiffness(space, constrained=True):
    """Stiffness matrix K_ij = integral grad b_i . grad b_j (CSR, SPD)."""
    rule = space.quad
    _, dn = space.tables(rule)
    g, vols = space.geometry()
    ref = np.einsum("q,qac,qbd->cdab", rule.weights, dn, dn)
    gg = np.einsum("eck,edk->ecd", g, g) * vols[:, None, None]
    blocks = np.einsum("ecd,cdab->eab", gg, ref)
    return space._scatter(_mirror_upper(blocks), constrained)


def assemble_mass(space, constrained=True):
    """Mass matrix M_ij = integral b_i b_j (CSR, SPD)."""
    rule = space.quad
    b, _ = space.tables(rule)
    ref = np.einsum("q,qa,qb->ab", rule.weights, b, b)
    _, vols = space.geometry()
    blocks = vols[:, None, None] * ref[None, :, :]
    return space._scatter(_mirror_upper(blocks), constrained)


def assemble_weighted_mass(space, w, rule=None, constrained=True):
    """Weighted mass integral w(x) b_i b_j with w given at quadrature points.

    w has shape (n_els, nq) on `rule` (default: the space's nonlinear rule).
    """
    if rule is None:
        rule = space.quad_nl
    w = np.asarray(w, dtype=float)
    if w.shape != (space.mesh.n_tets, rule.n_points):
        raise ValueError(
            f"weight array shape {w.shape} does not match "
            f"({space.mesh.n_tets}, {rule.n_points})"
        )
    if not np.all(np.isfinite(w)):
        raise ValueError("non-finite quadrature weight values")
    b, _ = space.tables(rule)
    _, vols = space.geometry()
    wq = w * rule.weights[None, :] * vols[:, None]
    blocks = np.einsum("eq,qa,qb->eab", wq, b, b)
    return space._scatter(_mirror_upper(blocks), constrained)


def mass_matrix(space):
    """Constrained mass matrix, assembled once and cached on the space."""
    if space._mass is None:
        space._mass = assemble_mass(space)
    return space._mass


def stiffness_matrix(space):
    """Constrained stiffness matrix, assembled once and cached on the space."""
    if space._stiffness is None:
        space._stiffness = assemble_stiffness(space)
    return space._stiffness


def load_vector(space, f, rule=None, constrained=True):
    """Load vector integral f b_i for a quadrature-point field f (n_els, nq)."""
    if rule is None:
        rule = space.quad_nl
    b, _ = space.tables(rule)
    _, vols = space.geometry()
    # weights factor as w_q * vol_e; folding vol in after the contraction
    # avoids a second field-sized temporary
    per_node = np.einsum("eq,qa->ea", np.asarray(f) * rule.weights[None, :], b)
    per_node *= vols[:, None]
    dofmap = space.element_dof_map if constrained else space.element_node_map
    ndof = space.n_dofs if constrained else space.n_nodes
    flat = dofmap.ravel()
    keep = flat >= 0
    return np.bincount(flat[keep], weights=per_node.ravel()[keep], minlength=ndof)


class FeFunction:
    """Coefficients of one function in a space (free dofs only, zero trace)."""

    def __init__(self, space, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (space.n_dofs,):
            raise ValueError(
                f"coefficient length {coeffs.shape} does not match n_dofs {space.n_dofs}"
            )
        self.space = space
        self.coeffs = coeffs


def project_function(space, f):
    """Nodal (Lagrange) interpolant of the callable f on the free nodes."""
    vals = np.asarray(f(space.dof_coords), dtype=float)
    if vals.shape != (space.n_dofs,):
        raise ValueError("callable must return one value per dof coordinate")
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite function value at a dof")
    return FeFunction(space, vals)


def norms(space, u, v=None):
    """(L2, H1) norm of u - v (or of u when v is omitted).

    The H1 norm is the full norm, sqrt(d^T (M + K) d).
    """
    du = u.coeffs if isinstance(u, FeFunction) else np.asarray(u, dtype=float)
    if v is not None:
        dv = v.coeffs if isinstance(v, FeFunction) else np.asarray(v, dtype=float)
        if isinstance(u, FeFunction) and isinstance(v, FeFunction) and u.space is not v.space:
            raise ValueError("functions live on different spaces")
        du = du - dv
    l2sq = du @ (mass_matrix(space) @ du)
    h1sq = l2sq + du @ (stiffness_matrix(space) @ du)
    return np.sqrt(max(l2sq, 0.0)), np.sqrt(max(h1sq, 0.0))


# -- field evaluation ------------------------------------------------------


def full_node_values(space, coeffs, boundary_values=None):
    """Expand free-dof coefficients to all nodes (boundary defaults to 0)."""
    if isinstance(coeffs, FeFunction):
        coeffs = coeffs.coeffs
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.ndim == 1:
        full = np.zeros(space.n_nodes)
    else:
        full = np.zeros((space.n_nodes, coeffs.shape[1]))
    full[space.free_nodes] = coeffs
    if boundary_values is not None:
        full[space.boundary_nodes] = boundary_values
    return full


def quad_values(space, coeffs, rule=None, boundary_values=None):
    """Values at all quadrature points; (n_els, nq) or (n_els, nq, ncol)."""
    if rule is None:
        rule = space.quad_nl
    full = full_node_values(space, coeffs, boundary_values)
    b, _ = space.tables(rule)
    gathered = full[space.element_node_map]
    if gathered.ndim == 2:
        return np.einsum("ea,qa->eq", gathered, b)
    return np.einsum("eac,qa->eqc", gathered, b)


def quad_gradients(space, coeffs, rule=None, boundary_values=None):
    """Gradients at quadrature points; (n_els, nq, 3) or (n_els, nq, ncol, 3)."""
    if rule is None:
        rule = space.quad_nl
    full = full_node_values(space, coeffs, boundary_values)
    _, dn = space.tables(rule)
    g, _ = space.geometry()
    gathered = full[space.element_node_map]
    if gathered.ndim == 2:
        return np.einsum("ea,qac,eck->eqk", gathered, dn, g)
    return np.einsum("eam,qac,eck->eqmk", gathered, dn, g)


def evaluate_at_points(space, coeffs, points, boundary_values=None, grad=False):
    """Evaluate an FE function at arbitrary points of the box.

    Uses structured point location on the uniform grid; exact wherever the
    function is polynomial on the containing element (always, for conforming
    evaluation of this space's own functions).
    """
    full = full_node_values(space, coeffs, boundary_values)
    tids, lam = locate_points(space.mesh, points)
    nodes = space.element_node_map[tids]
    c = full[nodes]                                   # (npts, nloc) or (npts, nloc, ncol)
    b = basis_values(space.degree, lam)
    vals = np.einsum("pa,pa->p", c, b) if c.ndim == 2 else np.einsum("pam,pa->pm", c, b)
    if not grad:
        return vals
    dn = basis_grads(space.degree, lam)
    g, _ = space.geometry()
    ge = g[tids]
    if c.ndim == 2:
        grads = np.einsum("pa,pac,pck->pk", c, dn, ge)
    else:
        grads = np.einsum("pam,pac,pck->pmk", c, dn, ge)
    return vals, grads


class DensityField:
    """Electron density sampled at the nonlinear-rule quadrature points.

    values has shape (n_els, nq); nonnegative up to round-off.
    """

    def __init__(self, space, values, rule=None):
        self.space = space
        self.rule = rule if rule is not None else space.quad_nl
        values = np.asarray(values, dtype=float)
        if values.shape != (space.mesh.n_tets, self.rule.n_points):
            raise ValueError("density values do not match the quadrature layout")
        if values.min(initial=0.0) < -1e-12:
            raise ValueError(
                f"density negative beyond tolerance: min {values.min():.3e}"
            )
        self.values = np.maximum(values, 0.0)

    def integral(self):
        _, vols = self.space.geometry()
        return float(np.einsum("e,q,eq->", vols, self.rule.weights, self.values))


def density_from_orbitals(space, coeffs):
    """Density sum_i |phi_i|^2 at quadrature points from a coefficient block."""
    phi = quad_values(space, coeffs)                  # (n_els, nq, N) or (n_els, nq)
    vals = phi**2 if phi.ndim == 2 else np.einsum("eqm,eqm->eq", phi, phi)
    return DensityField(space, vals)
