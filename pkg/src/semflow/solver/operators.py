"""Assembled Helmholtz operator ``h1 * A + h2 * B`` on a mesh partition."""

from __future__ import annotations

import numpy as np

from .. import kernels
from .. import variants
from ..mesh import MeshPartition
from ..reference import interp3, registry


class OperatorError(RuntimeError):
    pass


def _as_field(value, shape, dtype):
    if value is None:
        return None
    arr = np.asarray(value, dtype=dtype)
    if arr.ndim == 0:
        return np.full(shape, arr, dtype=dtype)
    return np.ascontiguousarray(np.broadcast_to(arr, shape), dtype=dtype)


class HelmholtzOp:
    """``u -> mask * QQ^T (h1 A_e + h2 B_e) u`` in local (E-vector) form.

    Vectors are kept *assembled*: every copy of a shared dof holds the same
    value.  ``h1``/``h2`` are scalars or nodal arrays (possibly discontinuous
    across elements).  ``dirichlet`` lists the boundary tags that are masked.
    """

    def __init__(self, mesh: MeshPartition, h1=1.0, h2=0.0, dirichlet=(), nullspace=None, dtype=np.float64):
        if mesh.gs is None:
            raise OperatorError("mesh partition has no gather-scatter; call setup_gs first")
        self.mesh = mesh
        self.gs = mesh.gs
        self.dtype = np.dtype(dtype)
        self.dirichlet = tuple(dirichlet)
        shape = (mesh.E,) + (mesh.n,) * 3
        self.h1 = _as_field(h1, shape, self.dtype)
        self.h2 = _as_field(h2, shape, self.dtype)
        bmask = mesh.boundary_mask(self.dirichlet) if self.dirichlet else np.zeros(shape, bool)
        # a node is Dirichlet if any copy touches a Dirichlet face
        bmask = self.gs.apply(bmask.astype(float), "max") > 0
        self.mask = (~bmask).astype(self.dtype)
        if nullspace is None:
            nullspace = not self.dirichlet and not np.any(self.h2)
        self.nullspace = bool(nullspace)
        geom = mesh.geom
        self.g = np.ascontiguousarray(geom.g, dtype=self.dtype)
        self.mass = np.ascontiguousarray(geom.mass, dtype=self.dtype)
        self.D = np.ascontiguousarray(registry.deriv(mesh.order).entries, dtype=self.dtype)
        self.inv_mult = self.gs.inv_mult.astype(self.dtype)
        self.bmass = self.gs.apply(geom.mass)  # assembled mass (always FP64)
        self.flops = 0
        self._diag = None

    @property
    def shape(self):
        return self.mask.shape

    def nbytes(self) -> int:
        arrs = [self.g, self.mass, self.mask, self.inv_mult, self.h1, self.h2, self._diag]
        return int(sum(a.nbytes for a in arrs if a is not None))

    def local_apply(self, u):
        ax = kernels.ax_numpy if self.dtype == np.float32 else variants.registry.current("laplacian_apply")
        w = ax(u, self.g, self.D, self.h1)
        if self.h2 is not None:
            w = w + self.h2 * self.mass * u
        n = self.mesh.n
        self.flops += self.mesh.E * (12 * n**4 + 15 * n**3)
        return w

    def apply(self, u):
        w = self.local_apply(np.asarray(u, dtype=self.dtype))
        return self.gs.apply(w) * self.mask

    def diag(self):
        """Assembled diagonal (1 on masked rows)."""
        if self._diag is None:
            D = self.D.astype(np.float64)
            g = self.g.astype(np.float64)
            if self.h1 is not None:
                g = g * self.h1[:, None]
            d2 = D**2
            dd = np.diag(D)
            di = dd[None, None, None, :]
            dj = dd[None, None, :, None]
            dk = dd[None, :, None, None]
            out = np.einsum("mi,ekjm->ekji", d2, g[:, 0])
            out += np.einsum("mj,ekmi->ekji", d2, g[:, 3])
            out += np.einsum("mk,emji->ekji", d2, g[:, 5])
            out += 2.0 * (g[:, 1] * di * dj + g[:, 2] * di * dk + g[:, 4] * dj * dk)
            if self.h2 is not None:
                out += self.h2 * self.mass
            out = self.gs.apply(out)
            out = np.where(self.mask > 0, out, 1.0)
            self._diag = out.astype(self.dtype)
        return self._diag

    def dot(self, u, v) -> float:
        return self.gs.dot(u, v)

    def norm(self, u) -> float:
        return float(np.sqrt(max(self.dot(u, u), 0.0)))

    def remove_mean(self, u):
        if not self.nullspace:
            return u
        comm = self.gs.comm
        s = comm.allreduce(np.array([np.sum(u * self.inv_mult), np.sum(self.inv_mult)], dtype=np.float64), "sum")
        return u - (s[0] / s[1])

    def coarsen(self, p: int, dtype=None) -> "HelmholtzOp":
        """The same operator rediscretized at polynomial order ``p``."""
        mesh = self.mesh
        cm = mesh.coarsened(p)
        cm.setup_gs(self.gs.comm)
        J = registry.interp(mesh.order, p)

        def down(a):
            if a is None:
                return None
            return interp3(J, a.astype(np.float64))

        return HelmholtzOp(cm, down(self.h1), down(self.h2), self.dirichlet, self.nullspace,
                           dtype=self.dtype if dtype is None else dtype)

    def lift(self, values):
        """Assembled vector that carries ``values`` on masked nodes, 0 elsewhere."""
        return np.where(self.mask > 0, 0.0, values)
