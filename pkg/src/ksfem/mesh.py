"""Uniform tetrahedral meshes of the box [-L, L]^3 and quadrature on the reference tet.

The resolution parameter n puts 2n cells along each coordinate direction
(cell edge L/n), and every cube is split into six tetrahedra that share the
cube's main diagonal (the Kuhn split).  All tets are congruent up to
reflection, so the family is shape regular under refinement, and doubling n
refines the mesh exactly, giving nested P1/P2 spaces.

Lengths are in bohr throughout.
"""

import itertools

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

# The six permutations of (0,1,2), fixed order.  Tet k of a cube corresponds
# to PERMS[k]: the region where the fractional coordinates sorted descending
# follow that axis order.
PERMS = tuple(itertools.permutations(range(3)))
_PERM_PARITY = tuple(
    (sum(1 for a in range(3) for b in range(a + 1, 3) if p[a] > p[b])) % 2 for p in PERMS
)
# lookup: base-3 encoding of a permutation -> its index in PERMS
_PERM_RANK = np.full(27, -1, dtype=np.int64)
for _k, _p in enumerate(PERMS):
    _PERM_RANK[_p[0] * 9 + _p[1] * 3 + _p[2]] = _k

BOUNDARY_TOL = 1e-10  # relative to L


class Mesh:
    """Uniform Kuhn-split tetrahedral mesh of [-L, L]^3.

    Attributes
    ----------
    vertices : (n_vertices, 3) float array, lexicographic in (z, y, x).
    tets : (48 n^3, 4) int array, positively oriented; tet 6*c + k lives in
        cube c (lexicographic in (z, y, x)) and realizes permutation PERMS[k].
    boundary_vertices : sorted int array of vertex ids on the box faces.
    h : max element diameter, (L/n)*sqrt(3).
    level : refinement counter (0 for a freshly built mesh).
    L, n : box half-width and resolution (the grid has 2n cells per axis).
    """

    def __init__(self, vertices, tets, boundary_vertices, h, level, L, n):
        self.vertices = vertices
        self.tets = tets
        self.boundary_vertices = boundary_vertices
        self.h = h
        self.level = level
        self.L = L
        self.n = n

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_tets(self):
        return self.tets.shape[0]

    def cell_size(self):
        return self.L / self.n

    def tet_volumes(self):
        """Signed volumes, positive for a well-oriented mesh."""
        v = self.vertices[self.tets]
        e = v[:, 1:] - v[:, :1]
        return np.linalg.det(e) / 6.0


def build_uniform_mesh(L, n):
    """Build the uniform Kuhn mesh at resolution n on [-L, L]^3.

    Parameters
    ----------
    L : box half-width in bohr, > 0 and finite.
    n : resolution, >= 1; the grid has 2n cells per axis (cell edge L/n).

    Returns
    -------
    Mesh with (2n+1)^3 vertices and 48 n^3 tets, h = (L/n) sqrt(3).
    """
    if not (np.isfinite(L) and L > 0):
        raise ValueError(f"box half-width must be positive and finite, got {L}")
    n = int(n)
    if n < 1:
        raise ValueError(f"resolution must be >= 1, got {n}")

    grid = 2 * n
    m = grid + 1
    s = L / n
    axis = -L + s * np.arange(m)
    axis[-1] = L  # avoid round-off drift on the far face
    zz, yy, xx = np.meshgrid(axis, axis, axis, indexing="ij")
    vertices = np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])

    # vertex id of lattice point (ix, iy, iz), lexicographic in (z, y, x)
    def vid(ix, iy, iz):
        return (iz * m + iy) * m + ix

    iz, iy, ix = np.meshgrid(
        np.arange(grid), np.arange(grid), np.arange(grid), indexing="ij"
    )
    ix = ix.ravel()
    iy = iy.ravel()
    iz = iz.ravel()

    tets = np.empty((6 * grid**3, 4), dtype=np.int64)
    eye = np.eye(3, dtype=np.int64)
    for k, perm in enumerate(PERMS):
        o1 = eye[perm[0]]
        o2 = eye[perm[0]] + eye[perm[1]]
        v0 = vid(ix, iy, iz)
        v1 = vid(ix + o1[0], iy + o1[1], iz + o1[2])
        v2 = vid(ix + o2[0], iy + o2[1], iz + o2[2])
        v3 = vid(ix + 1, iy + 1, iz + 1)
        if _PERM_PARITY[k]:
            v1, v2 = v2, v1  # restore positive orientation for odd permutations
        tets[k::6, 0] = v0
        tets[k::6, 1] = v1
        tets[k::6, 2] = v2
        tets[k::6, 3] = v3

    tol = BOUNDARY_TOL * L
    on_boundary = (np.abs(np.abs(vertices) - L) <= tol).any(axis=1)
    boundary_vertices = np.nonzero(on_boundary)[0]

    h = s * np.sqrt(3.0)
    return Mesh(vertices, tets, boundary_vertices, h, 0, L, n)


def refine(mesh):
    """Uniform refinement: resolution doubled, h halved, level incremented."""
    out = build_uniform_mesh(mesh.L, 2 * mesh.n)
    out.level = mesh.level + 1
    return out


class Quadrature:
    """Quadrature rule on the reference tetrahedron.

    points are barycentric, shape (nq, 4); weights are positive and sum to 1,
    so integrating f over a tet T is vol(T) * sum_q w_q f(x_q).
    """

    def __init__(self, points, weights, order):
        self.points = points
        self.weights = weights
        self.order = order

    @property
    def n_points(self):
        return self.points.shape[0]


def quadrature_rule(order):
    """Positive-weight rule on the reference tet, exact to the given degree.

    order 1 is the centroid rule, order 2 the classical symmetric 4-point
    rule; orders 3..6 use conical-product Gauss-Jacobi rules (all weights
    positive, all points strictly interior).
    """
    if order not in (1, 2, 3, 4, 5, 6):
        raise ValueError(f"unsupported quadrature order {order}, need 1..6")
    if order == 1:
        pts = np.full((1, 4), 0.25)
        w = np.array([1.0])
    elif order == 2:
        a = (5.0 - np.sqrt(5.0)) / 20.0
        b = (5.0 + 3.0 * np.sqrt(5.0)) / 20.0
        pts = np.full((4, 4), a)
        np.fill_diagonal(pts, b)
        w = np.full(4, 0.25)
    else:
        pts, w = _conical_rule(order)
    return Quadrature(pts, w, order)


def _conical_rule(degree):
    # Collapse a tensor product of 1D Gauss rules onto the simplex:
    #   x = xi, y = eta (1 - xi), z = zeta (1 - xi)(1 - eta),
    # which turns the volume element into (1-xi)^2 (1-eta) d(zeta) d(eta) d(xi).
    npt = (degree + 2) // 2
    xj2, wj2 = roots_jacobi(npt, 2.0, 0.0)
    xj1, wj1 = roots_jacobi(npt, 1.0, 0.0)
    xl, wl = roots_legendre(npt)
    xi = 0.5 * (xj2 + 1.0)
    eta = 0.5 * (xj1 + 1.0)
    zeta = 0.5 * (xl + 1.0)
    wxi = wj2 / 8.0
    weta = wj1 / 4.0
    wzeta = wl / 2.0

    XI, ETA, ZETA = np.meshgrid(xi, eta, zeta, indexing="ij")
    WX, WE, WZ = np.meshgrid(wxi, weta, wzeta, indexing="ij")
    x = XI.ravel()
    y = (ETA * (1.0 - XI)).ravel()
    z = (ZETA * (1.0 - XI) * (1.0 - ETA)).ravel()
    w = (WX * WE * WZ).ravel() * 6.0  # normalize: reference volume is 1/6
    pts = np.column_stack([1.0 - x - y - z, x, y, z])
    return pts, w


def locate_points(mesh, points):
    """Structured point location: tet id and barycentric coords per point.

    Points are clipped into the box, so querying exactly on the boundary (or a
    hair outside due to round-off) is safe.  On faces shared by two tets the
    assignment is deterministic but arbitrary; conforming FE functions agree
    from either side.

    Returns (tet_ids, lam) with lam in the tet's *stored* vertex order.
    """
    pts = np.atleast_2d(points)
    s = mesh.cell_size()
    grid = 2 * mesh.n
    u = (pts + mesh.L) / s
    cell = np.clip(np.floor(u).astype(np.int64), 0, grid - 1)
    frac = u - cell

    order = np.argsort(-frac, axis=1, kind="stable")  # axes sorted by descending frac
    rank = _PERM_RANK[order[:, 0] * 9 + order[:, 1] * 3 + order[:, 2]]
    f0 = np.take_along_axis(frac, order[:, :1], axis=1)[:, 0]
    f1 = np.take_along_axis(frac, order[:, 1:2], axis=1)[:, 0]
    f2 = np.take_along_axis(frac, order[:, 2:3], axis=1)[:, 0]

    lam = np.empty((pts.shape[0], 4))
    lam[:, 0] = 1.0 - f0
    lam[:, 1] = f0 - f1
    lam[:, 2] = f1 - f2
    lam[:, 3] = f2
    odd = np.asarray(_PERM_PARITY)[rank] == 1
    lam[odd, 1], lam[odd, 2] = lam[odd, 2].copy(), lam[odd, 1].copy()

    cube = (cell[:, 2] * grid + cell[:, 1]) * grid + cell[:, 0]
    return cube * 6 + rank, lam


def write_vtk(mesh, path):
    """Dump the mesh in ASCII VTK legacy format (cell type 10) for viewers."""
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write(f"ksfem uniform mesh L={mesh.L} n={mesh.n}\n")
        f.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {mesh.n_vertices} double\n")
        np.savetxt(f, mesh.vertices, fmt="%.16g")
        f.write(f"CELLS {mesh.n_tets} {5 * mesh.n_tets}\n")
        cells = np.column_stack([np.full(mesh.n_tets, 4, dtype=np.int64), mesh.tets])
        np.savetxt(f, cells, fmt="%d")
        f.write(f"CELL_TYPES {mesh.n_tets}\n")
        np.savetxt(f, np.full(mesh.n_tets, 10, dtype=np.int64), fmt="%d")
