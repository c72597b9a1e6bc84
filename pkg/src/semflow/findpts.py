"""Distributed point location and spectral interpolation.

Three phases: :meth:`Findpts.setup` builds a replicated global hash
(cell -> ranks) and a per-rank local hash (cell -> elements);
:meth:`Findpts.find` routes each query to its candidate ranks, inverts the
element map by Newton iteration and sends the best hit back to the query
rank; :meth:`Findpts.eval` evaluates nodal fields at the located points.
"""

from __future__ import annotations

import csv
import itertools
from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import variants
from .comm import Communicator, RoutedMessage, crystal_route, pack_arrays, unpack_arrays
from .mesh import Element, MeshPartition
from .reference import barycentric_weights, registry

INTERIOR, BORDER, NOT_FOUND = 0, 1, 2
STATUS_NAMES = ("interior", "border", "not_found")
BORDER_TOL = 1e-8
INTERIOR_TOL = 1e-12


class FindptsError(RuntimeError):
    """Wrong call order: find before setup, or eval with stale results."""


class SetupError(ValueError):
    pass


# ---------------------------------------------------------------------------
# hash tables


@dataclass
class _CellGrid:
    lo: np.ndarray
    h: np.ndarray
    dims: np.ndarray
    offsets: np.ndarray  # CSR over flattened cells
    items: np.ndarray

    @property
    def ncells(self):
        return int(np.prod(self.dims))

    def cell_of(self, x):
        """Flat cell index per point, -1 outside the grid."""
        x = np.atleast_2d(x)
        rel = (x - self.lo) / self.h
        idx = np.floor(rel).astype(np.int64)
        # points on the upper bound belong to the last cell
        idx = np.where((rel >= self.dims) & (rel <= self.dims * (1 + 1e-12)), self.dims - 1, idx)
        inside = np.all((idx >= 0) & (idx < self.dims), axis=1)
        flat = (idx[:, 2] * self.dims[1] + idx[:, 1]) * self.dims[0] + idx[:, 0]
        return np.where(inside, flat, -1)

    def candidates(self, cell):
        if cell < 0:
            return self.items[:0]
        return self.items[self.offsets[cell]:self.offsets[cell + 1]]

    def box_cells(self, bmin, bmax):
        i0 = np.clip(np.floor((bmin - self.lo) / self.h).astype(np.int64), 0, self.dims - 1)
        i1 = np.clip(np.floor((bmax - self.lo) / self.h).astype(np.int64), 0, self.dims - 1)
        ranges = [np.arange(a, b + 1) for a, b in zip(i0, i1)]
        k, j, i = np.meshgrid(ranges[2], ranges[1], ranges[0], indexing="ij")
        return ((k * self.dims[1] + j) * self.dims[0] + i).ravel()


def _grid_shape(lo, hi, target):
    ext = np.maximum(hi - lo, 1e-300)
    vol = float(np.prod(ext))
    h = (vol / max(target, 1)) ** (1.0 / 3.0)
    dims = np.maximum(1, np.ceil(ext / h - 1e-9)).astype(np.int64)
    return dims, ext / dims


def _build_grid(lo, hi, target, pairs_fn):
    dims, h = _grid_shape(lo, hi, target)
    grid = _CellGrid(lo, h, dims, np.zeros(1, np.int64), np.zeros(0, np.int64))
    cells, items = pairs_fn(grid)
    return _fill(grid, cells, items)


def _fill(grid, cells, items):
    if cells.size:
        pairs = np.unique(np.stack([cells, items], axis=1), axis=0)
    else:
        pairs = np.zeros((0, 2), np.int64)
    grid.items = pairs[:, 1].copy()
    grid.offsets = np.searchsorted(pairs[:, 0], np.arange(grid.ncells + 1))
    return grid


@dataclass
class GlobalHash:
    grid: _CellGrid

    def ranks(self, x):
        return self.grid.candidates(int(self.grid.cell_of(x)[0]))


@dataclass
class LocalHash:
    grid: _CellGrid

    def elements(self, x):
        return self.grid.candidates(int(self.grid.cell_of(x)[0]))


# ---------------------------------------------------------------------------
# results


@dataclass
class FindResult:
    status: np.ndarray
    rank: np.ndarray
    element: np.ndarray
    rstar: np.ndarray
    distance: np.ndarray
    gid: np.ndarray
    token: tuple = ()

    def __len__(self):
        return self.status.size

    def status_names(self):
        return [STATUS_NAMES[s] for s in self.status]


def _element_diameter(X):
    """Largest vertex-to-vertex distance; ``X`` is ``(E,3,n,n,n)``."""
    c = X[:, :, [0, -1]][:, :, :, [0, -1]][:, :, :, :, [0, -1]].reshape(X.shape[0], 3, 8)
    d = c[:, :, :, None] - c[:, :, None, :]
    return np.sqrt(np.einsum("ecab,ecab->eab", d, d)).max(axis=(1, 2))


def _nearest_node_guess(X, elem, xs, z):
    """Reference coordinates of the GLL node nearest to each query."""
    n = z.size
    nodes = X[elem].reshape(elem.size, 3, n**3)
    d = np.einsum("pcm,pcm->pm", nodes - xs[:, :, None], nodes - xs[:, :, None])
    m = np.argmin(d, axis=1)
    k, j, i = np.unravel_index(m, (n, n, n))
    return np.stack([z[i], z[j], z[k]], axis=1)


def newton_invert(element: Element, xstar, guess=(0.0, 0.0, 0.0), maxit=50):
    """``argmin_{r in [-1,1]^3} |x(r) - xstar|`` for a single element."""
    rule = registry.rule(element.order)
    lam = barycentric_weights(rule.nodes)
    r, d, c = kernels.newton(element.coords[None], np.zeros(1, np.int64), np.atleast_2d(np.asarray(xstar, float)),
                             np.atleast_2d(np.asarray(guess, float)), rule.nodes, lam, maxit)
    return r[0], float(d[0]), bool(c[0])


def classify(rstar, dist, diam):
    status = np.full(dist.shape, NOT_FOUND, dtype=np.int8)
    interior = dist <= INTERIOR_TOL * diam
    on_edge = np.any(np.abs(rstar) >= 1.0 - BORDER_TOL, axis=-1)
    status[~interior & on_edge] = BORDER
    status[interior] = INTERIOR
    return status


# ---------------------------------------------------------------------------


class Findpts:
    def __init__(self, mesh: MeshPartition, comm: Communicator, padding=1e-2, cells_per_element=2.0, maxit=50):
        self.comm = comm
        self.padding = padding
        self.cells_per_element = cells_per_element
        self.maxit = maxit
        self.mesh = None
        self.ghash = None
        self.lhash = None
        self._setups = 0
        self.timers = None
        self.setup(mesh)

    def _timer(self, name):
        return nullcontext() if self.timers is None else self.timers(name)

    @property
    def token(self):
        return (id(self), self._setups, self.mesh.version)

    def setup(self, mesh: MeshPartition):
        if mesh.E_global == 0:
            raise SetupError("cannot set up point location on an empty mesh")
        comm = self.comm
        self.mesh = mesh
        self._setups += 1
        X = np.asarray(mesh.coords, dtype=np.float64)
        self.X = X
        N = mesh.order
        self.z = registry.rule(N).nodes
        self.lam = barycentric_weights(self.z)
        self.diam = _element_diameter(X) if mesh.E else np.zeros(0)
        if mesh.E:
            bmin = X.min(axis=(2, 3, 4))
            bmax = X.max(axis=(2, 3, 4))
            pad = self.padding * (bmax - bmin).max(axis=1, keepdims=True)
            self.bmin, self.bmax = bmin - pad, bmax + pad
        else:
            self.bmin = np.zeros((0, 3))
            self.bmax = np.zeros((0, 3))
        self.bcen = 0.5 * (self.bmin + self.bmax)
        local_lo = self.bmin.min(axis=0) if mesh.E else np.full(3, np.inf)
        local_hi = self.bmax.max(axis=0) if mesh.E else np.full(3, -np.inf)
        lo = comm.allreduce(local_lo, "min")
        hi = comm.allreduce(local_hi, "max")
        target = self.cells_per_element * mesh.E_global

        def global_pairs(grid):
            cells = [grid.box_cells(a, b) for a, b in zip(self.bmin, self.bmax)]
            mine = np.unique(np.concatenate(cells)) if cells else np.zeros(0, np.int64)
            allc = comm.allgather(mine)
            c = np.concatenate(allc)
            r = np.concatenate([np.full(a.size, q, np.int64) for q, a in enumerate(allc)])
            return c, r

        self.ghash = GlobalHash(_build_grid(lo, hi, target, global_pairs))

        if mesh.E:
            def local_pairs(grid):
                cells = [grid.box_cells(a, b) for a, b in zip(self.bmin, self.bmax)]
                e = np.concatenate([np.full(c.size, k, np.int64) for k, c in enumerate(cells)])
                return np.concatenate(cells), e

            self.lhash = LocalHash(_build_grid(local_lo, local_hi, self.cells_per_element * mesh.E, local_pairs))
        else:
            self.lhash = None
        return self.ghash, self.lhash

    # -- find ----------------------------------------------------------------

    def _local_find(self, xs):
        """Best local hit per point: (status, element, rstar, distance)."""
        m = xs.shape[0]
        status = np.full(m, NOT_FOUND, np.int8)
        elem = np.full(m, -1, np.int64)
        rstar = np.zeros((m, 3))
        dist = np.full(m, np.inf)
        if m == 0 or self.lhash is None:
            return status, elem, rstar, dist
        cells = self.lhash.grid.cell_of(xs)
        cand = []
        for p in range(m):
            c = self.lhash.grid.candidates(int(cells[p]))
            if c.size:
                inside = np.all((xs[p] >= self.bmin[c]) & (xs[p] <= self.bmax[c]), axis=1)
                c = c[inside]
                dc = np.sum((self.bcen[c] - xs[p]) ** 2, axis=1)
                c = c[np.lexsort((c, dc))]
            cand.append(c)
        depth = max((c.size for c in cand), default=0)
        for k in range(depth):
            pts = np.array([p for p in range(m) if cand[p].size > k and status[p] != INTERIOR], dtype=np.int64)
            if pts.size == 0:
                break
            el = np.array([cand[p][k] for p in pts], dtype=np.int64)
            r0 = _nearest_node_guess(self.X, el, xs[pts], self.z)
            r, d, _ = kernels.newton(self.X, el, xs[pts], r0, self.z, self.lam, self.maxit)
            st = classify(r, d, self.diam[el])
            for q, p in enumerate(pts):
                if st[q] == NOT_FOUND:
                    if status[p] == NOT_FOUND:
                        dist[p] = min(dist[p], d[q])
                    continue
                key_new = (st[q], 0.0 if st[q] == INTERIOR else d[q], el[q])
                key_old = (status[p], 0.0 if status[p] == INTERIOR else dist[p], elem[p])
                if elem[p] < 0 or key_new < key_old:
                    status[p], elem[p], rstar[p], dist[p] = st[q], el[q], r[q], d[q]
        return status, elem, rstar, dist

    def find(self, points, exclude=()) -> FindResult:
        """Locate ``points``; ranks in ``exclude`` are never asked.

        Unresolved points come back ``not_found`` with ``distance`` set to the
        closest approach seen (``inf`` if no element was a candidate).
        """
        if self.ghash is None:
            raise FindptsError("find called before setup")
        comm = self.comm
        me = comm.rank
        xs = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        m = xs.shape[0]
        cells = self.ghash.grid.cell_of(xs)
        per_rank: dict[int, list[int]] = {}
        for p in range(m):
            for q in self.ghash.grid.candidates(int(cells[p])):
                if int(q) in exclude:
                    continue
                per_rank.setdefault(int(q), []).append(p)
        out = [
            RoutedMessage(q, me, pack_arrays(np.array(idx, np.int64), xs[idx]), 0)
            for q, idx in sorted(per_rank.items())
        ]
        inbox, _ = crystal_route(comm, out)
        replies = []
        for msg in inbox:
            qidx, qx = unpack_arrays(msg.payload)
            st, el, r, d = self._local_find(qx)
            gid = np.full(el.size, -1, np.int64)
            gid[el >= 0] = self.mesh.ids[el[el >= 0]]
            replies.append(RoutedMessage(msg.source, me, pack_arrays(qidx, st, el, r, d, gid), 1))
        inbox, _ = crystal_route(comm, replies)
        status = np.full(m, NOT_FOUND, np.int8)
        rank = np.full(m, -1, np.int64)
        elem = np.full(m, -1, np.int64)
        rstar = np.zeros((m, 3))
        dist = np.full(m, np.inf)
        gid = np.full(m, -1, np.int64)
        for msg in inbox:
            qidx, st, el, r, d, g = unpack_arrays(msg.payload)
            q = msg.source
            for a in range(qidx.size):
                p = qidx[a]
                if st[a] == NOT_FOUND:
                    if status[p] == NOT_FOUND:
                        dist[p] = min(dist[p], d[a])
                    continue
                new = (st[a], 0.0 if st[a] == INTERIOR else d[a], q, el[a])
                old = (status[p], 0.0 if status[p] == INTERIOR else dist[p], rank[p], elem[p])
                if rank[p] < 0 or new < old:
                    status[p], rank[p], elem[p], rstar[p], dist[p], gid[p] = st[a], q, el[a], r[a], d[a], g[a]
        return FindResult(status, rank, elem, rstar, dist, gid, self.token)

    # -- eval ----------------------------------------------------------------

    def eval(self, fields, res: FindResult):
        """Values ``(nfields, npoints)`` (or ``(npoints,)`` for one field); NaN where not found."""
        if res.token != self.token:
            raise FindptsError("find results are stale: mesh or setup changed since find")
        comm = self.comm
        me = comm.rank
        f = np.asarray(fields, dtype=np.float64)
        single = f.ndim == 4
        if single:
            f = f[None]
        nf = f.shape[0]
        m = len(res)
        found = np.nonzero(res.status != NOT_FOUND)[0]
        out = []
        for q in np.unique(res.rank[found]):
            idx = found[res.rank[found] == q]
            out.append(RoutedMessage(int(q), me, pack_arrays(idx, res.element[idx], res.rstar[idx]), 2))
        inbox, _ = crystal_route(comm, out)
        ev = variants.registry.current("findpts_eval")
        back = []
        for msg in inbox:
            idx, el, r = unpack_arrays(msg.payload)
            with self._timer("eval kernel"):
                vals = ev(f, el, r, self.z, self.lam)
            back.append(RoutedMessage(msg.source, me, pack_arrays(idx, vals), 3))
        inbox, _ = crystal_route(comm, back)
        values = np.full((nf, m), np.nan)
        for msg in inbox:
            idx, vals = unpack_arrays(msg.payload)
            values[:, idx] = vals
        return values[0] if single else values

    # -- diagnostics -----------------------------------------------------------

    def dump_hash_csv(self, path, which="global"):
        grid = self.ghash.grid if which == "global" else self.lhash.grid
        counts = np.diff(grid.offsets)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "k", "count"])
            for c, (k, j, i) in enumerate(itertools.product(*(range(d) for d in grid.dims[::-1]))):
                w.writerow([i, j, k, int(counts[c])])
