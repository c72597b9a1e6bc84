"""p-multigrid V-cycle with Chebyshev smoothing and an assembled coarse solve."""

from __future__ import annotations

from contextlib import nullcontext

import numpy as np

from ..reference import interp3, registry
from .chebyshev import ChebyshevSmoother, ConfigurationError
from .coarse import CoarseProblem
from .operators import HelmholtzOp


def default_schedule(N: int) -> list[int]:
    if N >= 7:
        return [N, 5, 3, 1]
    if N >= 4:
        return [N, 3, 1]
    return [N, 1] if N > 1 else [1]


def _check_schedule(schedule, N):
    s = [int(p) for p in schedule]
    if not s or s[0] != N:
        raise ConfigurationError(f"pMG schedule must start at the mesh order {N}: {s}")
    if s[-1] != 1:
        raise ConfigurationError(f"pMG schedule must end at 1: {s}")
    if any(b >= a for a, b in zip(s, s[1:])):
        raise ConfigurationError(f"pMG schedule must be strictly decreasing: {s}")
    return s


class PMGHierarchy:
    """Levels ``schedule[0] > ... > 1``; level 0 shares the fine mesh.

    ``precision="FP32"`` stores all smoother levels and does all smoothing
    arithmetic in single precision; the coarse factorization stays FP64.
    """

    def __init__(self, op: HelmholtzOp, schedule=None, cheb_order=6, lmin_frac=0.1, lmax_factor=1.1,
                 precision="FP64", coarse_tol=1e-8):
        N = op.mesh.order
        self.schedule = _check_schedule(default_schedule(N) if schedule is None else schedule, N)
        self.precision = precision.upper()
        if self.precision not in ("FP64", "FP32"):
            raise ConfigurationError(f"unknown preconditioner precision {precision!r}")
        dt = np.float32 if self.precision == "FP32" else np.float64
        self.dtype = np.dtype(dt)
        self.fine = op
        if op.dtype == self.dtype:
            top = op
        else:
            top = HelmholtzOp(op.mesh, op.h1, op.h2, op.dirichlet, op.nullspace, dtype=dt)
        self.levels = [top]
        for p in self.schedule[1:]:
            self.levels.append(top.coarsen(p, dtype=dt))
        self.interp = [
            registry.interp(a, b).entries.astype(dt) for a, b in zip(self.schedule[1:], self.schedule[:-1])
        ]
        self.smoothers = [ChebyshevSmoother(L, cheb_order, lmin_frac, lmax_factor) for L in self.levels[:-1]]
        self.coarse = CoarseProblem(self.levels[-1], tol=coarse_tol)
        self.applications = 0
        self.timers = None

    def _timer(self, name):
        return nullcontext() if self.timers is None else self.timers(name)

    def nbytes(self) -> int:
        """Bytes held by level operators and smoothers."""
        total = 0
        for L in self.levels:
            total += L.nbytes()
        for s in self.smoothers:
            total += s.dinv.nbytes
        return total

    def restrict(self, level, r):
        """Transpose of :meth:`prolong` acting on an assembled residual."""
        fine = self.levels[level]
        coarse = self.levels[level + 1]
        J = self.interp[level]
        rc = interp3(J.T, r * fine.inv_mult)
        return coarse.gs.apply(rc) * coarse.mask

    def prolong(self, level, e):
        return interp3(self.interp[level], e) * self.levels[level].mask

    def _cycle(self, level, r):
        if level == len(self.levels) - 1:
            with self._timer("coarse grid"):
                return self.coarse.solve(r)
        A = self.levels[level]
        sm = self.smoothers[level]
        label = f"pMG smoother L{level}"
        with self._timer(label):
            x = sm.smooth(None, r)
            res = r - A.apply(x)
        x = x + self.prolong(level, self._cycle(level + 1, self.restrict(level, res)))
        with self._timer(label):
            return sm.smooth(x, r)

    def vcycle(self, r):
        self.applications += 1
        r = np.asarray(r)
        out = self._cycle(0, r.astype(self.dtype))
        return out.astype(r.dtype)

    __call__ = vcycle


def pmg_vcycle(hier: PMGHierarchy, residual):
    return hier.vcycle(residual)


def reduced_precision_precondition(op, enable=True, **kw) -> PMGHierarchy:
    return PMGHierarchy(op, precision="FP32" if enable else "FP64", **kw)
