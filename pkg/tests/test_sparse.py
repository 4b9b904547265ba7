import numpy as np
import pytest

from ksfem.fem import FeSpace, mass_matrix, stiffness_matrix
from ksfem.mesh import build_uniform_mesh
from ksfem.sparse import RankUpdate, cg_solve, dense_eig, lobpcg_solve, make_jacobi


def _pencil(n=3):
    space = FeSpace(build_uniform_mesh(3.0, n), 1)
    return stiffness_matrix(space), mass_matrix(space)


# -- conjugate gradients ---------------------------------------------------


def test_cg_matches_dense_solve():
    k, _ = _pencil(2)
    rng = np.random.default_rng(0)
    b = rng.standard_normal(k.shape[0])
    x, info = cg_solve(k, b, tol=1e-12)
    assert info.converged
    ref = np.linalg.solve(k.toarray(), b)
    assert np.max(np.abs(x - ref)) < 1e-9 * np.max(np.abs(ref))


def test_cg_warm_start_skips_work():
    k, _ = _pencil(2)
    rng = np.random.default_rng(1)
    b = rng.standard_normal(k.shape[0])
    x, _ = cg_solve(k, b, tol=1e-12)
    x2, info = cg_solve(k, b, x0=x, tol=1e-10)
    assert info.converged
    assert info.iterations == 0


def test_cg_zero_rhs():
    k, _ = _pencil(2)
    x, info = cg_solve(k, np.zeros(k.shape[0]))
    assert info.converged
    assert np.all(x == 0.0)


def test_cg_preconditioner_pays_off():
    # badly scaled SPD diagonal + weak coupling; Jacobi flattens the spectrum
    rng = np.random.default_rng(4)
    n = 120
    d = np.logspace(0.0, 5.0, n)
    c = rng.standard_normal((n, n))
    a = np.diag(d) + 1e-3 * (c @ c.T)
    b = rng.standard_normal(n)
    _, plain = cg_solve(a, b, tol=1e-10, maxiter=5000)
    _, prec = cg_solve(a, b, tol=1e-10, maxiter=5000, precond=lambda r: r / d)
    assert prec.converged
    assert prec.iterations < plain.iterations


def test_cg_rejects_indefinite_operator():
    a = -np.eye(6)
    with pytest.raises(np.linalg.LinAlgError):
        cg_solve(a, np.ones(6))


def test_cg_reports_nonconvergence():
    rng = np.random.default_rng(5)
    c = rng.standard_normal((80, 80))
    a = c @ c.T + 1e-8 * np.eye(80)
    _, info = cg_solve(a, rng.standard_normal(80), tol=1e-14, maxiter=3)
    assert not info.converged
    assert info.residual > 0.0


def test_jacobi_preconditioner_shapes_and_floor():
    a = np.diag([2.0, 0.0, -4.0])
    pc = make_jacobi(a)
    v = pc(np.ones(3))
    assert np.all(np.isfinite(v))
    assert np.isclose(v[0], 0.5)
    assert np.isclose(v[2], 0.25)  # magnitude of the diagonal is used
    blk = pc(np.ones((3, 2)))
    assert blk.shape == (3, 2)
    assert np.allclose(blk[:, 0], v)


# -- rank-update operator --------------------------------------------------


def test_rank_update_against_dense():
    rng = np.random.default_rng(8)
    k, _ = _pencil(2)
    u = rng.standard_normal((k.shape[0], 3))
    for coef in (None, np.diag([0.5, -1.0, 2.0])):
        op = RankUpdate(k, u, coef=coef)
        dense = op.toarray()
        x = rng.standard_normal((k.shape[0], 2))
        assert np.allclose(op @ x, dense @ x, atol=1e-10)
        assert np.allclose(op.diagonal(), np.diag(dense), atol=1e-12)
        assert np.allclose(dense, dense.T, atol=1e-12)


# -- eigensolvers ----------------------------------------------------------


def test_dense_eig_sorted_and_sliced():
    k, m = _pencil(2)
    vals, vecs = dense_eig(k, m)
    assert np.all(np.diff(vals) >= -1e-12)
    v3, w3 = dense_eig(k, m, k=3)
    assert v3.shape == (3,) and w3.shape == (k.shape[0], 3)
    assert np.allclose(v3, vals[:3])
    r = k @ w3 - (m @ w3) * v3[None, :]
    assert np.max(np.linalg.norm(r, axis=0)) < 1e-10 * max(1.0, vals[2])


def test_lobpcg_matches_dense():
    k, m = _pencil(3)
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((k.shape[0], 4))
    eig = lobpcg_solve(k, m, x0, tol=1e-10, maxiter=300,
                       precond=make_jacobi(k), dense_cutoff=0)
    assert eig.converged
    assert np.all(eig.residuals <= 1e-10)
    vals, _ = dense_eig(k, m, k=4)
    assert np.max(np.abs(eig.values - vals) / vals) < 1e-9
    gram = eig.vectors.T @ (m @ eig.vectors)
    assert np.max(np.abs(gram - np.eye(4))) < 1e-9


def test_lobpcg_trace_history_monotone():
    k, m = _pencil(3)
    rng = np.random.default_rng(1)
    eig = lobpcg_solve(k, m, rng.standard_normal((k.shape[0], 3)),
                       tol=1e-9, maxiter=300, precond=make_jacobi(k),
                       dense_cutoff=0)
    tr = np.asarray(eig.trace_history)
    slack = 1e-10 * max(1.0, np.abs(tr).max())
    assert np.all(np.diff(tr) <= slack)


def test_lobpcg_dense_cutoff_delegates():
    k, m = _pencil(2)
    x0 = np.zeros((k.shape[0], 2))
    eig = lobpcg_solve(k, m, x0, dense_cutoff=10**6)
    assert eig.converged and eig.iterations == 0
    vals, _ = dense_eig(k, m, k=2)
    assert np.array_equal(eig.values, vals)


def test_lobpcg_tight_tolerance_converges():
    # near-converged residual columns are tiny; they must survive the
    # Gram rank cutoff in the expansion basis for tolerances this tight
    k, m = _pencil(3)
    rng = np.random.default_rng(2)
    eig = lobpcg_solve(k, m, rng.standard_normal((k.shape[0], 4)),
                       tol=1e-12, maxiter=400, precond=make_jacobi(k),
                       dense_cutoff=0)
    assert eig.converged
    assert np.all(eig.residuals <= 1e-12)


def test_lobpcg_recovers_from_rank_deficient_start():
    k, m = _pencil(3)
    rng = np.random.default_rng(3)
    col = rng.standard_normal(k.shape[0])
    x0 = np.column_stack([col, col, col])  # rank one
    eig = lobpcg_solve(k, m, x0, tol=1e-9, maxiter=300,
                       precond=make_jacobi(k), dense_cutoff=0)
    assert eig.converged
    vals, _ = dense_eig(k, m, k=3)
    assert np.max(np.abs(eig.values - vals) / vals) < 1e-8


def test_lobpcg_deterministic():
    k, m = _pencil(3)
    rng = np.random.default_rng(6)
    x0 = rng.standard_normal((k.shape[0], 3))
    a = lobpcg_solve(k, m, x0.copy(), tol=1e-10, maxiter=300,
                     precond=make_jacobi(k), dense_cutoff=0)
    b = lobpcg_solve(k, m, x0.copy(), tol=1e-10, maxiter=300,
                     precond=make_jacobi(k), dense_cutoff=0)
    assert np.array_equal(a.vectors, b.vectors)
    assert np.array_equal(a.values, b.values)
