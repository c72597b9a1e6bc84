"""Assembled p=1 problem, replicated on every rank."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .krylov import SolverError

DIRECT_LIMIT = 50_000


class CoarseProblem:
    """Global sparse matrix of a (usually order-1) ``HelmholtzOp``.

    Element matrices are formed by probing the local operator with unit
    vectors, then every rank gathers all triplets and factorizes the same
    matrix, so coarse solutions are identical across ranks.
    """

    def __init__(self, op, tol=1e-8, direct_limit=DIRECT_LIMIT):
        mesh = op.mesh
        comm = op.gs.comm
        self.op = op
        self.comm = comm
        self.tol = tol
        self.nullspace = op.nullspace
        n3 = mesh.n**3
        E = mesh.E
        probe = np.zeros((n3, E, n3))
        probe[np.arange(n3), :, np.arange(n3)] = 1.0
        cols = []
        for k in range(n3):
            u = probe[k].reshape((E,) + (mesh.n,) * 3)
            w = _local64(op, u)
            cols.append(w.reshape(E, n3))
        Ke = np.stack(cols, axis=2)  # (E, row, col)
        g = mesh.gids.reshape(E, n3)
        rows = np.repeat(g[:, :, None], n3, axis=2)
        colsg = np.repeat(g[:, None, :], n3, axis=1)
        keep = Ke != 0.0
        parts = comm.allgather((rows[keep], colsg[keep], Ke[keep]))
        mask = comm.allgather((g.ravel(), (op.mask.reshape(E, n3) == 0).ravel()))
        nd = mesh.ndof_global
        self.ndof = nd
        R = np.concatenate([p[0] for p in parts])
        C = np.concatenate([p[1] for p in parts])
        V = np.concatenate([p[2] for p in parts])
        A = sp.coo_matrix((V, (R, C)), shape=(nd, nd)).tocsr()
        fixed = np.zeros(nd, dtype=bool)
        for gg, m in mask:
            fixed[gg[m]] = True
        self.fixed = fixed
        self.A_full = A
        keepv = (~fixed).astype(float)
        Dk = sp.diags(keepv)
        A = Dk @ A @ Dk + sp.diags(fixed.astype(float))
        self.pin = None
        if self.nullspace:
            self.pin = int(np.flatnonzero(~fixed)[0])
            e = np.ones(nd)
            e[self.pin] = 0.0
            Dp = sp.diags(e)
            A = Dp @ A @ Dp
            A = A + sp.coo_matrix(([1.0], ([self.pin], [self.pin])), shape=(nd, nd))
        self.A = A.tocsc()
        self.direct = nd <= direct_limit
        try:
            self._lu = spla.splu(self.A) if self.direct else None
        except RuntimeError as exc:
            raise SolverError(f"coarse factorization failed: {exc}") from None
        self.gids = mesh.gids

    def solve_global(self, b):
        b = np.asarray(b, dtype=np.float64).copy()
        b[self.fixed] = 0.0
        if self.pin is not None:
            b[self.pin] = 0.0
        if self.direct:
            x = self._lu.solve(b)
            # rounding can hide an exact singularity from the factorization
            bn = np.linalg.norm(b)
            if bn > 0 and np.linalg.norm(self.A @ x - b) > 1e-6 * bn:
                raise SolverError("coarse solve residual too large (singular matrix without nullspace handling?)")
        else:
            x = _jacobi_cg(self.A, b, self.tol)
        if not np.all(np.isfinite(x)):
            raise SolverError("coarse solve produced non-finite values (singular matrix?)")
        if self.nullspace:
            x -= x[~self.fixed].mean()
        return x

    def solve(self, rhs):
        """Assembled local rhs -> assembled local solution."""
        dtype = rhs.dtype
        g = self.gids.ravel()
        u, first = np.unique(g, return_index=True)
        mine = (u, np.asarray(rhs, dtype=np.float64).ravel()[first])
        b = np.zeros(self.ndof)
        for gg, vv in self.comm.allgather(mine):
            b[gg] = vv
        x = self.solve_global(b)
        return x[self.gids].astype(dtype)


def _local64(op, u):
    from .. import kernels

    w = kernels.ax_numpy(u, op.g.astype(np.float64), op.D.astype(np.float64), op.h1.astype(np.float64))
    if op.h2 is not None:
        w = w + op.h2.astype(np.float64) * op.mass.astype(np.float64) * u
    return w


def _jacobi_cg(A, b, tol, maxit=10_000):
    d = A.diagonal()
    x = np.zeros_like(b)
    r = b.copy()
    bn = np.linalg.norm(b)
    if bn == 0.0:
        return x
    z = r / d
    p = z.copy()
    rz = r @ z
    for _ in range(maxit):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= tol * bn:
            return x
        z = r / d
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"coarse CG did not reach {tol:.1e} in {maxit} iterations")


def coarse_solve(cp: CoarseProblem, rhs):
    return cp.solve(rhs)
