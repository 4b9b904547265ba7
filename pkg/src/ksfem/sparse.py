"""Iterative solvers used by the ground-state loop.

Both solvers are deliberately hand-rolled rather than wrapped from scipy:
the SCF loop needs deterministic warm starts, per-iteration Ritz traces and
soft locking, and scipy's lobpcg gives no control over those.  dense_eig
wraps LAPACK and serves as the independent cross-check.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

_RANK_EPS = 1e-12


class RankUpdate:
    """Symmetric operator base + U C U^T without forming it densely."""

    def __init__(self, base, u, coef=None):
        self.base = base
        self.u = np.asarray(u, dtype=float)
        self.coef = None if coef is None else np.asarray(coef, dtype=float)
        self.shape = base.shape

    def dot(self, x):
        ux = self.u.T @ x
        if self.coef is not None:
            ux = self.coef @ ux
        return self.base @ x + self.u @ ux

    __matmul__ = dot

    def diagonal(self):
        if self.coef is None:
            low = np.einsum("ir,ir->i", self.u, self.u)
        else:
            low = np.einsum("ir,rs,is->i", self.u, self.coef, self.u)
        return self.base.diagonal() + low

    def toarray(self):
        mid = self.u if self.coef is None else self.u @ self.coef
        out = self.base.toarray() if sp.issparse(self.base) else np.asarray(self.base)
        return out + mid @ self.u.T


def make_jacobi(a, m=None, shift=0.0):
    """Diagonal preconditioner for a (+ shift*m); SPD by construction."""
    d = np.asarray(a.diagonal(), dtype=float).copy()
    if m is not None and shift != 0.0:
        d += shift * m.diagonal()
    d = np.abs(d)
    floor = _RANK_EPS * max(d.max(), 1.0)
    d = np.maximum(d, floor)
    return lambda r: r / (d[:, None] if np.ndim(r) == 2 else d)


@dataclass
class CgResult:
    iterations: int
    residual: float
    converged: bool


def cg_solve(a, b, x0=None, tol=1e-10, maxiter=None, precond=None):
    """Preconditioned CG for SPD a; stops at ||r|| <= tol * ||b||."""
    b = np.asarray(b, dtype=float)
    n = b.size
    if maxiter is None:
        maxiter = max(1000, 10 * n)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), CgResult(0, 0.0, True)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - a @ x
    z = precond(r) if precond is not None else r
    p = z.copy()
    rz = r @ z
    for it in range(maxiter):
        rnorm = np.linalg.norm(r)
        if rnorm <= tol * bnorm:
            return x, CgResult(it, rnorm / bnorm, True)
        ap = a @ p
        curv = p @ ap
        if curv <= 0.0:
            raise np.linalg.LinAlgError(
                f"cg_solve hit nonpositive curvature {curv:.3e}; operator not SPD"
            )
        alpha = rz / curv
        x += alpha * p
        r -= alpha * ap
        z = precond(r) if precond is not None else r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, CgResult(maxiter, np.linalg.norm(r) / bnorm, False)


@dataclass
class EigenResult:
    values: np.ndarray
    vectors: np.ndarray
    iterations: int
    residuals: np.ndarray
    converged: bool
    trace_history: list = field(default_factory=list)


def dense_eig(a, m, k=None):
    """Lowest-k generalized eigenpairs by dense LAPACK (cross-check path)."""
    ad = a.toarray() if hasattr(a, "toarray") else np.asarray(a, dtype=float)
    md = m.toarray() if hasattr(m, "toarray") else np.asarray(m, dtype=float)
    vals, vecs = scipy.linalg.eigh(ad, md, driver="gv")
    if k is not None:
        vals, vecs = vals[:k], vecs[:, :k]
    return vals, vecs


def _m_orthonormalize(x, m):
    """Whiten x against the m inner product; drops near-dependent columns."""
    g = x.T @ (m @ x)
    g = 0.5 * (g + g.T)
    w, v = scipy.linalg.eigh(g)
    keep = w > _RANK_EPS * max(w[-1], 0.0)
    if not np.any(keep):
        return x[:, :0]
    return x @ (v[:, keep] / np.sqrt(w[keep]))


def _whiten_pair(x, mx, transform=False):
    """M-orthonormalize x reusing a precomputed m @ x; drops rank."""
    if x.shape[1] == 0:
        return (x, mx, np.zeros((0, 0))) if transform else (x, mx)
    g = x.T @ mx
    g = 0.5 * (g + g.T)
    w, v = scipy.linalg.eigh(g)
    keep = w > _RANK_EPS * max(w[-1], 0.0)
    t = v[:, keep] / np.sqrt(w[keep]) if np.any(keep) else v[:, :0]
    if transform:
        return x @ t, mx @ t, t
    return x @ t, mx @ t


def _restart_block(a, m, x, nev):
    """Seeded perturbation restart after the trial basis loses rank."""
    rng = np.random.default_rng(0)
    x = _m_orthonormalize(x + 1e-8 * rng.standard_normal(x.shape), m)
    ax, mx = a @ x, m @ x
    theta, c = _rayleigh_ritz(x.T @ ax, x.T @ mx, nev)
    return x @ c, ax @ c, mx @ c, theta, None, None, None


def lobpcg_solve(a, m, x0, tol=1e-8, maxiter=200, precond=None, dense_cutoff=400):
    """Lowest eigenpairs of a v = lambda m v by block preconditioned iteration.

    The block size is x0.shape[1].  Fully deterministic for fixed inputs; on
    small problems (n <= dense_cutoff) it delegates to dense_eig outright.
    Residual columns below tol are soft-locked (kept in the basis, excluded
    from preconditioned expansion).  trace_history records sum(ritz values)
    per iteration and is non-increasing up to round-off.
    """
    x = np.array(x0, dtype=float)
    n, nev = x.shape
    if n <= dense_cutoff:
        vals, vecs = dense_eig(a, m, k=nev)
        res = _residual_norms(a, m, vecs, vals)
        return EigenResult(vals, vecs, 0, res, True, [float(np.sum(vals))])

    x = _m_orthonormalize(x, m)
    if x.shape[1] < nev:
        rng = np.random.default_rng(0)
        pad = rng.standard_normal((n, nev - x.shape[1]))
        x = _m_orthonormalize(np.hstack([x, pad]), m)
    ax, mx = a @ x, m @ x
    theta, c = _rayleigh_ritz(x.T @ ax, x.T @ mx, nev)
    x, ax, mx = x @ c, ax @ c, mx @ c
    p = ap = mp = None
    history = []
    restarted = False

    for it in range(1, maxiter + 1):
        r = ax - mx * theta[None, :]
        res = np.linalg.norm(r, axis=0) / (1.0 + np.abs(theta))
        history.append(float(np.sum(theta)))
        if np.all(res <= tol):
            return EigenResult(theta, x, it - 1, res, True, history)

        active = res > tol
        w = r[:, active]
        if precond is not None:
            w = precond(w)
        # normalize the expansion block; raw residual columns are tiny near
        # convergence and would sit below the Gram rank cutoff otherwise
        mw = m @ w
        wn = np.sqrt(np.maximum(np.einsum("ij,ij->j", w, mw), 0.0))
        keepw = wn > 0.0
        w, mw = w[:, keepw] / wn[keepw], mw[:, keepw] / wn[keepw]
        # strip the components along x and p before the Rayleigh-Ritz solve;
        # with a near-identity Gram the whitening there cannot amplify
        # cancellation noise into spurious low Ritz values (concentrated
        # starting blocks on fine meshes hit exactly that failure otherwise)
        for _ in range(2):
            cx = mx.T @ w
            w -= x @ cx
            mw -= mx @ cx
            if p is not None:
                cdir = mp.T @ w
                w -= p @ cdir
                mw -= mp @ cdir
        w, mw = _whiten_pair(w, mw)
        if w.shape[1] == 0:
            # residual fully inside span[x, p]: treat like a rank collapse
            if restarted:
                return EigenResult(theta, x, it, res, False, history)
            restarted = True
            x, ax, mx, theta, p, ap, mp = _restart_block(a, m, x, nev)
            continue
        aw = a @ w
        s = np.hstack([x, w] if p is None else [x, w, p])
        as_ = np.hstack([ax, aw] if p is None else [ax, aw, ap])
        ms_ = np.hstack([mx, mw] if p is None else [mx, mw, mp])

        ga = s.T @ as_
        gm = s.T @ ms_
        try:
            theta_new, c = _rayleigh_ritz(ga, gm, nev)
        except np.linalg.LinAlgError:
            if restarted:
                return EigenResult(theta, x, it, res, False, history)
            restarted = True
            x, ax, mx, theta, p, ap, mp = _restart_block(a, m, x, nev)
            continue

        cp = c.copy()
        cp[:nev, :] = 0.0
        theta = theta_new
        x, ax, mx = s @ c, as_ @ c, ms_ @ c
        p, ap, mp = s @ cp, as_ @ cp, ms_ @ cp
        for _ in range(2):
            cx = mx.T @ p
            p -= x @ cx
            ap -= ax @ cx
            mp -= mx @ cx
        p, mp, tp = _whiten_pair(p, mp, transform=True)
        if p.shape[1] == 0:
            p = ap = mp = None
        else:
            ap = ap @ tp

    r = ax - mx * theta[None, :]
    res = np.linalg.norm(r, axis=0) / (1.0 + np.abs(theta))
    history.append(float(np.sum(theta)))
    return EigenResult(theta, x, maxiter, res, np.all(res <= tol), history)


def _rayleigh_ritz(ga, gm, nev):
    """Lowest nev Ritz pairs of the reduced pencil; raises on rank collapse."""
    ga = 0.5 * (ga + ga.T)
    gm = 0.5 * (gm + gm.T)
    w, v = scipy.linalg.eigh(gm)
    keep = w > _RANK_EPS * max(w[-1], 0.0)
    if keep.sum() < nev:
        raise np.linalg.LinAlgError("trial basis lost rank in Rayleigh-Ritz")
    t = v[:, keep] / np.sqrt(w[keep])
    h = t.T @ ga @ t
    h = 0.5 * (h + h.T)
    vals, vecs = scipy.linalg.eigh(h)
    return vals[:nev], t @ vecs[:, :nev]


def _residual_norms(a, m, vecs, vals):
    r = a @ vecs - (m @ vecs) * vals[None, :]
    return np.linalg.norm(r, axis=0) / (1.0 + np.abs(vals))
