"""Preconditioned conjugate gradients on assembled E-vectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .operators import OperatorError


@dataclass
class SolveResult:
    x: np.ndarray
    iterations: int
    residuals: list = field(default_factory=list)
    converged: bool = True


class SolverError(RuntimeError):
    pass


def jacobi(op):
    inv = 1.0 / op.diag()

    def apply(r):
        return r * inv * op.mask

    return apply


def pcg(op, rhs, tol=1e-8, maxit=500, precond=None, x0=None, callback=None, rnorm0=None) -> SolveResult:
    """Solve ``op x = rhs``; stop when ``|r| <= tol * |rhs|``.

    ``rnorm0`` overrides the reference norm (used when ``x0`` came from a
    projection and the tolerance must refer to the original right-hand side).
    All inner products go through the gather-scatter's fixed-order allreduce.
    """
    b = op.remove_mean(rhs * op.mask)
    bnorm = op.norm(b) if rnorm0 is None else rnorm0
    if x0 is None:
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = np.array(x0, dtype=b.dtype)
        r = b - op.apply(x)
        r = op.remove_mean(r)
    rnorm = op.norm(r)
    hist = [rnorm]
    if bnorm == 0.0 or rnorm <= tol * bnorm:
        return SolveResult(x, 0, hist, True)
    M = precond if precond is not None else (lambda v: v * op.mask)
    z = op.remove_mean(M(r))
    p = z.copy()
    rz = op.dot(r, z)
    for it in range(1, maxit + 1):
        Ap = op.apply(p)
        pAp = op.dot(p, Ap)
        if not pAp > 0.0:
            raise OperatorError(f"operator not positive definite: p^T A p = {pAp:.3e} at iteration {it}")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rnorm = op.norm(r)
        hist.append(rnorm)
        if callback is not None:
            callback(x)
        if rnorm <= tol * bnorm:
            return SolveResult(x, it, hist, True)
        z = op.remove_mean(M(r))
        rz_new = op.dot(r, z)
        beta = rz_new / rz
        rz = rz_new
        p = z + beta * p
    return SolveResult(x, maxit, hist, False)
