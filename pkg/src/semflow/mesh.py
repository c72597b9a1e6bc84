"""Curvilinear hex meshes, geometric factors and gather-scatter.

A :class:`GlobalMesh` holds every element of a generated mesh together with
its topology (coordinate-hashed global numbering at any polynomial order).
Ranks work on :class:`MeshPartition` objects, which carry their own (possibly
deformed) coordinates and a reference back to the shared topology.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import kernels
from .comm import Communicator, RoutedMessage, crystal_route, pack_arrays, unpack_arrays
from .reference import interp3, registry

FACE_SIDES = ("x-", "x+", "y-", "y+", "z-", "z+")


class GeometryError(ValueError):
    pass


class PartitionError(ValueError):
    pass


class TopologyError(ValueError):
    pass


def _ref_lattice(N):
    z = registry.rule(N).nodes
    R = np.broadcast_to(z[None, None, :], (N + 1,) * 3)
    S = np.broadcast_to(z[None, :, None], (N + 1,) * 3)
    T = np.broadcast_to(z[:, None, None], (N + 1,) * 3)
    return R, S, T


def box_element_coords(lo, hi, N):
    """GLL lattice ``(3, n, n, n)`` of the affine brick ``[lo, hi]``."""
    R, S, T = _ref_lattice(N)
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    X = np.empty((3, N + 1, N + 1, N + 1))
    for c, ref in enumerate((R, S, T)):
        X[c] = lo[c] + 0.5 * (ref + 1.0) * (hi[c] - lo[c])
    return X


def number_points(points: np.ndarray, tol: float) -> tuple[np.ndarray, int]:
    """Identify points closer than ``tol``; ids follow first appearance."""
    tree = cKDTree(points)
    pairs = tree.query_pairs(tol, output_type="ndarray")
    npt = points.shape[0]
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(npt, npt))
    _, labels = connected_components(graph, directed=False)
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    # relabel components in order of their first point
    rank = np.empty_like(first)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    return rank[inverse], first.size


class GlobalMesh:
    """All elements of a mesh plus cached global numberings per order."""

    def __init__(self, coords, N, tags=None, region=None, ids=None):
        coords = np.asarray(coords, dtype=float)
        if coords.ndim != 5 or coords.shape[1] != 3 or coords.shape[2:] != (N + 1,) * 3:
            raise GeometryError(f"coords shape {coords.shape} does not match order {N}")
        self.order = N
        self.coords = coords
        self.E = coords.shape[0]
        if self.E == 0:
            raise GeometryError("mesh has no elements")
        self.tags = np.full((self.E, 6), "", dtype=object) if tags is None else np.asarray(tags, dtype=object)
        self.region = np.zeros(self.E, dtype=np.int64) if region is None else np.asarray(region, dtype=np.int64)
        self.ids = np.arange(self.E, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        lo = coords.min(axis=(0, 2, 3, 4))
        hi = coords.max(axis=(0, 2, 3, 4))
        self.diameter = float(np.linalg.norm(hi - lo))
        self.tol = 1e-9 * self.diameter
        self._numbering: dict[int, tuple[np.ndarray, int]] = {}
        self._lock = threading.Lock()

    def coords_at(self, p):
        if p == self.order:
            return self.coords
        return interp3(registry.interp(self.order, p), self.coords)

    def numbering(self, p=None):
        """Global dof ids ``(E, p+1, p+1, p+1)`` and the dof count at order ``p``."""
        p = self.order if p is None else p
        with self._lock:
            if p not in self._numbering:
                X = self.coords_at(p)
                pts = np.moveaxis(X, 1, -1).reshape(-1, 3)
                gid, n = number_points(pts, self.tol)
                self._numbering[p] = (gid.reshape(self.E, p + 1, p + 1, p + 1), n)
            return self._numbering[p]

    def partition(self, P: int) -> list["MeshPartition"]:
        """Lexicographic block partition into ``P`` contiguous chunks."""
        if P < 1 or P > self.E:
            raise PartitionError(f"cannot split {self.E} elements over {P} ranks")
        # balanced chunks: the first E % P ranks get one extra element
        q, rem = divmod(self.E, P)
        sizes = [q + (1 if r < rem else 0) for r in range(P)]
        bounds = np.concatenate(([0], np.cumsum(sizes)))
        return [MeshPartition(self, np.arange(bounds[r], bounds[r + 1]), r, P) for r in range(P)]

    def check_jacobian(self):
        geom_factors(self.coords, self.order, self.ids)


@dataclass
class Element:
    id: int
    order: int
    coords: np.ndarray
    boundary_tags: tuple


@dataclass
class GeomFactors:
    jac: np.ndarray
    g: np.ndarray  # (E, 6, n, n, n): rr, rs, rt, ss, st, tt, weighted by w|J|
    mass: np.ndarray
    drdx: np.ndarray  # (E, 3, 3, n, n, n): d r_i / d x_a
    jacmat: np.ndarray  # (E, 3, 3, n, n, n): d x_a / d r_i

    @property
    def metric(self):
        return self.g


def geom_factors(coords, N, ids=None) -> GeomFactors:
    """Geometric factors for element coordinates ``(E, 3, n, n, n)``."""
    D = registry.deriv(N).entries
    w = registry.rule(N).weights
    E = coords.shape[0]
    n = N + 1
    Jm = np.empty((E, 3, 3, n, n, n))
    for c in range(3):
        xr, xs, xt = kernels.grad_numpy(np.ascontiguousarray(coords[:, c]), D)
        Jm[:, c, 0], Jm[:, c, 1], Jm[:, c, 2] = xr, xs, xt
    Jl = np.moveaxis(Jm, (1, 2), (-2, -1))
    jac = np.linalg.det(Jl)
    bad = np.argwhere(~(jac > 0))
    if bad.size:
        e, k, j, i = bad[0]
        eid = int(ids[e]) if ids is not None else int(e)
        raise GeometryError(
            f"non-positive Jacobian {jac[e, k, j, i]:.3e} in element {eid} at node (i={i}, j={j}, k={k})"
        )
    inv = np.linalg.inv(Jl)  # [..., i, a] = d r_i / d x_a
    drdx = np.moveaxis(inv, (-2, -1), (1, 2))
    w3 = w[:, None, None] * w[None, :, None] * w[None, None, :]
    mass = w3 * jac
    g = np.empty((E, 6, n, n, n))
    for slot, (a, b) in enumerate(((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))):
        g[:, slot] = mass * np.einsum("exkji,exkji->ekji", drdx[:, a], drdx[:, b])
    return GeomFactors(jac=jac, g=g, mass=mass, drdx=drdx, jacmat=Jm)


def compute_geom_factors(element: Element) -> GeomFactors:
    return geom_factors(element.coords[None], element.order, [element.id])


def face_slices(N):
    """Index tuples (k, j, i) selecting each of the 6 faces."""
    a = slice(None)
    return [
        (a, a, 0), (a, a, N),
        (a, 0, a), (a, N, a),
        (0, a, a), (N, a, a),
    ]


def face_measures(coords, tags, N, tag, geom: GeomFactors | None = None):
    """Area weights ``(E, n, n, n)`` and area-weighted outward normals
    ``(E, 3, n, n, n)`` accumulated over the faces carrying ``tag``."""
    w = registry.rule(N).weights
    E = coords.shape[0]
    n = N + 1
    if geom is None:
        geom = geom_factors(coords, N)
    Jm = geom.jacmat
    area = np.zeros((E, n, n, n))
    nA = np.zeros((E, 3, n, n, n))
    sl = face_slices(N)
    w2 = w[:, None] * w[None, :]
    for f in range(6):
        els = np.nonzero(tags[:, f] == tag)[0]
        if els.size == 0:
            continue
        d = f // 2
        sign = 1.0 if f % 2 else -1.0
        # tangent pair ordered so that a x b points along +r_d
        ta, tb = [(1, 2), (2, 0), (0, 1)][d]
        k, j, i = sl[f]
        for e in els:
            A = Jm[e, :, ta][(slice(None),) + (k, j, i)]
            B = Jm[e, :, tb][(slice(None),) + (k, j, i)]
            cr = sign * np.cross(A, B, axis=0) * w2
            nA[e][(slice(None), k, j, i)] += cr
            area[e][(k, j, i)] += np.linalg.norm(cr, axis=0)
    return area, nA


class MeshPartition:
    """The elements one rank owns, in element order of the global mesh."""

    def __init__(self, gmesh: GlobalMesh, elements, rank, size, coords=None, order=None, version=0):
        self.gmesh = gmesh
        self.elements = np.asarray(elements, dtype=np.int64)
        self.rank = rank
        self.size = size
        self.order = gmesh.order if order is None else order
        self.coords = gmesh.coords_at(self.order)[self.elements] if coords is None else coords
        self.tags = gmesh.tags[self.elements]
        self.region = gmesh.region[self.elements]
        self.ids = gmesh.ids[self.elements]
        gid, ndof = gmesh.numbering(self.order)
        self.gids = gid[self.elements]
        self.ndof_global = ndof
        self.E_global = gmesh.E
        self.version = version
        self._geom = None
        self._faces: dict = {}
        self.gs: GatherScatter | None = None

    @property
    def E(self):
        return self.elements.size

    @property
    def n(self):
        return self.order + 1

    @property
    def n_gridpoints(self) -> int:
        """Resolution ``n = E N^3`` (the usual SEM gridpoint convention)."""
        return self.E_global * self.order**3

    @property
    def geom(self) -> GeomFactors:
        if self._geom is None:
            self._geom = geom_factors(self.coords, self.order, self.ids)
        return self._geom

    def element(self, e) -> Element:
        return Element(int(self.ids[e]), self.order, self.coords[e], tuple(self.tags[e]))

    def faces(self, tag):
        if tag not in self._faces:
            self._faces[tag] = face_measures(self.coords, self.tags, self.order, tag, self.geom)
        return self._faces[tag]

    def boundary_mask(self, tags) -> np.ndarray:
        """Boolean ``(E, n, n, n)``: nodes on any face carrying one of ``tags``."""
        m = np.zeros((self.E,) + (self.n,) * 3, dtype=bool)
        sl = face_slices(self.order)
        for f in range(6):
            for e in np.nonzero(np.isin(self.tags[:, f], list(tags)))[0]:
                m[e][sl[f]] = True
        return m

    def coarsened(self, p: int) -> "MeshPartition":
        """Same elements at polynomial order ``p`` (coords interpolated)."""
        X = interp3(registry.interp(self.order, p), self.coords)
        return MeshPartition(self.gmesh, self.elements, self.rank, self.size, coords=X, order=p, version=self.version)

    def setup_gs(self, comm: Communicator) -> "GatherScatter":
        self.gs = GatherScatter(self.gids, comm)
        return self.gs


def build_global_box(extents, domain=((0, 1), (0, 1), (0, 1)), N=4, tags=None) -> GlobalMesh:
    Ex, Ey, Ez = (int(v) for v in extents)
    if min(Ex, Ey, Ez) < 1:
        raise PartitionError(f"element extents must be >= 1, got {extents}")
    edges = [np.linspace(lo, hi, m + 1) for (lo, hi), m in zip(domain, (Ex, Ey, Ez))]
    names = dict(zip(FACE_SIDES, FACE_SIDES))
    if tags:
        names.update(tags)
    coords = np.empty((Ex * Ey * Ez, 3, N + 1, N + 1, N + 1))
    ftags = np.full((Ex * Ey * Ez, 6), "", dtype=object)
    e = 0
    for kz in range(Ez):
        for ky in range(Ey):
            for kx in range(Ex):
                lo = (edges[0][kx], edges[1][ky], edges[2][kz])
                hi = (edges[0][kx + 1], edges[1][ky + 1], edges[2][kz + 1])
                coords[e] = box_element_coords(lo, hi, N)
                for f, (idx, m) in enumerate(((kx, Ex), (ky, Ey), (kz, Ez))):
                    if idx == 0:
                        ftags[e, 2 * f] = names[FACE_SIDES[2 * f]]
                    if idx == m - 1:
                        ftags[e, 2 * f + 1] = names[FACE_SIDES[2 * f + 1]]
                e += 1
    return GlobalMesh(coords, N, ftags)


def build_box_mesh(extents, domain=((0, 1), (0, 1), (0, 1)), N=4, ranks=1, tags=None) -> list[MeshPartition]:
    """Affine box mesh split lexicographically over ``ranks`` partitions."""
    gm = build_global_box(extents, domain, N, tags)
    return gm.partition(ranks)


def deform(mesh: MeshPartition, fn) -> MeshPartition:
    """Apply ``fn(x, y, z) -> (x', y', z')`` pointwise to the partition's nodes."""
    X = mesh.coords
    new = np.stack(fn(X[:, 0], X[:, 1], X[:, 2]), axis=1).astype(float)
    out = MeshPartition(mesh.gmesh, mesh.elements, mesh.rank, mesh.size, coords=new, order=mesh.order,
                        version=mesh.version + 1)
    out.geom  # raises GeometryError on inverted elements
    out.gs = mesh.gs
    return out


def deform_global(gmesh: GlobalMesh, fn) -> GlobalMesh:
    X = gmesh.coords
    new = np.stack(fn(X[:, 0], X[:, 1], X[:, 2]), axis=1).astype(float)
    geom_factors(new, gmesh.order, gmesh.ids)
    out = GlobalMesh(new, gmesh.order, gmesh.tags, gmesh.region, gmesh.ids)
    # topology is unchanged by a smooth map; reuse the undeformed numbering
    for p in list(gmesh._numbering) + [gmesh.order]:
        out._numbering[p] = gmesh.numbering(p)
    return out


# ---------------------------------------------------------------------------
# gather-scatter


class GatherScatter:
    """Direct stiffness summation over a distributed global numbering.

    Setup finds, for every global id, the set of ranks holding a copy via a
    home-rank rendezvous through the crystal router.  Exchanges touch only
    shared ids, independent of the polynomial order's interior points.
    """

    strategies = ("per-message", "pre-pack")

    def __init__(self, gids: np.ndarray, comm: Communicator, strategy: str | None = None):
        self.comm = comm
        self.shape = gids.shape
        self.uniq, inv = np.unique(gids.ravel(), return_inverse=True)
        self.lid = inv.reshape(gids.shape)
        self.nlocal = self.uniq.size
        self.strategy = strategy
        P, me = comm.size, comm.rank
        self.neighbors: dict[int, np.ndarray] = {}
        if P > 1:
            home = self.uniq % P
            out = []
            for q in range(P):
                sel = self.uniq[home == q]
                out.append(RoutedMessage(q, me, pack_arrays(sel.astype(np.int64)), 0))
            inbox, _ = crystal_route(comm, out)
            owners: dict[int, list[int]] = {}
            for m in inbox:
                (ids,) = unpack_arrays(m.payload)
                for g in ids.tolist():
                    owners.setdefault(g, []).append(m.source)
            replies: dict[int, list[tuple[int, int]]] = {}
            for g, rs in owners.items():
                if len(rs) > 1:
                    for r in rs:
                        for o in rs:
                            if o != r:
                                replies.setdefault(r, []).append((g, o))
            back = []
            for r, pairs in sorted(replies.items()):
                arr = np.array(pairs, dtype=np.int64)
                back.append(RoutedMessage(r, me, pack_arrays(arr), 0))
            inbox, _ = crystal_route(comm, back)
            shared: dict[int, set] = {}
            for m in inbox:
                (arr,) = unpack_arrays(m.payload)
                for g, o in arr.tolist():
                    shared.setdefault(o, set()).add(g)
            for q in sorted(shared):
                ids = np.array(sorted(shared[q]), dtype=np.int64)
                self.neighbors[q] = np.searchsorted(self.uniq, ids)
        self.shared_pos = (
            np.unique(np.concatenate(list(self.neighbors.values()))) if self.neighbors else np.zeros(0, np.int64)
        )
        self.multiplicity = self.apply(np.ones(gids.shape))
        self.inv_mult = 1.0 / self.multiplicity

    def verify(self):
        """Collective topology check: neighbours agree on shared id sets (checksums)."""
        me = self.comm.rank
        msgs = [
            RoutedMessage(q, me, pack_arrays(np.array([self.uniq[pos].sum(), pos.size], dtype=np.int64)), 1)
            for q, pos in self.neighbors.items()
        ]
        inbox, _ = crystal_route(self.comm, msgs)
        ok = True
        for m in inbox:
            (arr,) = unpack_arrays(m.payload)
            pos = self.neighbors.get(m.source)
            if pos is None or arr[0] != self.uniq[pos].sum() or arr[1] != pos.size:
                ok = False
        if not self.comm.allreduce(int(ok), "min"):
            raise TopologyError("gather-scatter numbering inconsistent between neighbouring ranks")

    def _local_reduce(self, u, op):
        lid = self.lid.ravel()
        u = u.ravel()
        if op == "sum":
            return np.bincount(lid, weights=u, minlength=self.nlocal).astype(u.dtype, copy=False)
        fill = np.inf if op == "min" else -np.inf
        out = np.full(self.nlocal, fill, dtype=u.dtype)
        (np.minimum if op == "min" else np.maximum).at(out, lid, u)
        return out

    def _combine(self, own, received: dict[int, np.ndarray], op):
        out = own.copy()
        if op == "sum":
            acc = np.zeros_like(own)
            started = np.zeros(own.size, dtype=bool)
            me = self.comm.rank
            for q in sorted(set(received) | {me}):
                if q == me:
                    pos = self.shared_pos
                    vals = own[pos]
                else:
                    pos = self.neighbors[q]
                    vals = received[q]
                acc[pos] = np.where(started[pos], acc[pos] + vals, vals)
                started[pos] = True
            out[self.shared_pos] = acc[self.shared_pos]
        else:
            fn = np.minimum if op == "min" else np.maximum
            for q, vals in received.items():
                pos = self.neighbors[q]
                out[pos] = fn(out[pos], vals)
        return out

    def _exchange(self, own, op, strategy):
        if not self.neighbors:
            return {}
        comm = self.comm
        if strategy == "per-message":
            tag = comm._next_tag("gs")
            for q, pos in self.neighbors.items():
                comm.send(q, own[pos], tag)
            return {q: comm.recv(q, tag) for q in self.neighbors}
        msgs = [RoutedMessage(q, comm.rank, own[pos].tobytes(), 0) for q, pos in self.neighbors.items()]
        inbox, _ = crystal_route(comm, msgs)
        return {m.source: np.frombuffer(m.payload, dtype=own.dtype) for m in inbox}

    def apply(self, u: np.ndarray, op: str = "sum", strategy: str | None = None) -> np.ndarray:
        """Every copy of a shared dof receives the reduction over all copies."""
        if op not in ("sum", "min", "max"):
            raise ValueError(f"unknown gather-scatter op {op!r}")
        if strategy is None:
            strategy = self.strategy
        if strategy is None:
            from .variants import registry as _variants

            strategy = _variants.current("gs_exchange")
        u = np.asarray(u)
        lead = u.shape[: u.ndim - 4]
        flat = u.reshape((-1,) + self.shape)
        out = np.empty_like(flat)
        need_comm = self.comm.size > 1
        for b in range(flat.shape[0]):
            own = self._local_reduce(flat[b], op)
            if need_comm:
                received = self._exchange(own, op, strategy)
                own = self._combine(own, received, op)
            out[b] = own[self.lid]
        return out.reshape(lead + self.shape)

    def dot(self, u, v) -> float:
        """Global inner product counting each dof once."""
        local = float(np.sum(u * v * self.inv_mult))
        return self.comm.allreduce(local, "sum")


# ---------------------------------------------------------------------------
# binary container

MAGIC = b"MSEM"
FIELD_MAGIC = b"FELD"
VERSION = 1


def write_container(path, ids, coords, tags, N, P=1, fields=None):
    """Write elements (and optional named fields) as little-endian binary.

    Layout: ``MSEM`` | u32 version | u32 E | u32 N | u32 P, then per element
    i64 id | f64[3*(N+1)^3] coords | 6 tags as (u8 len, utf-8 bytes); then
    zero or more field records ``FELD`` | u16 name len | name | u32 ncomp |
    f64[E*ncomp*(N+1)^3].
    """
    E = len(ids)
    n3 = (N + 1) ** 3
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIII", VERSION, E, N, P))
        for e in range(E):
            fh.write(struct.pack("<q", int(ids[e])))
            fh.write(np.ascontiguousarray(coords[e], dtype="<f8").tobytes())
            for t in tags[e]:
                b = str(t).encode("utf-8")[:255]
                fh.write(struct.pack("<B", len(b)))
                fh.write(b)
        for name, arr in (fields or {}).items():
            arr = np.asarray(arr, dtype="<f8")
            if arr.ndim == 4:
                arr = arr[:, None]
            # stored element-major: (E, ncomp, n, n, n)
            if arr.shape[0] != E:
                arr = np.moveaxis(arr, 0, 1)
            ncomp = arr.shape[1]
            if arr.size != E * ncomp * n3:
                raise ValueError(f"field {name!r} has wrong size")
            nb = name.encode("utf-8")
            fh.write(FIELD_MAGIC)
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", ncomp))
            fh.write(np.ascontiguousarray(arr).tobytes())


@dataclass
class Container:
    version: int
    E: int
    N: int
    P: int
    ids: np.ndarray
    coords: np.ndarray
    tags: np.ndarray
    fields: dict = field(default_factory=dict)


def read_container(path) -> Container:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return _parse_container(path, data)
    except struct.error as exc:
        raise ValueError(f"{path}: truncated container ({exc})") from None


def _parse_container(path, data) -> Container:
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an MSEM container")
    version, E, N, P = struct.unpack_from("<IIII", data, 4)
    off = 20
    n = N + 1
    ids = np.empty(E, dtype=np.int64)
    coords = np.empty((E, 3, n, n, n))
    tags = np.full((E, 6), "", dtype=object)
    nb = 3 * n**3 * 8
    for e in range(E):
        (ids[e],) = struct.unpack_from("<q", data, off)
        off += 8
        coords[e] = np.frombuffer(data, dtype="<f8", count=3 * n**3, offset=off).reshape(3, n, n, n)
        off += nb
        for f in range(6):
            (L,) = struct.unpack_from("<B", data, off)
            off += 1
            tags[e, f] = data[off:off + L].decode("utf-8")
            off += L
    fields = {}
    while off < len(data):
        if data[off:off + 4] != FIELD_MAGIC:
            raise ValueError(f"{path}: corrupt field record at byte {off}")
        off += 4
        (L,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + L].decode("utf-8")
        off += L
        (ncomp,) = struct.unpack_from("<I", data, off)
        off += 4
        cnt = E * ncomp * n**3
        fields[name] = np.frombuffer(data, dtype="<f8", count=cnt, offset=off).reshape(E, ncomp, n, n, n).copy()
        off += cnt * 8
    return Container(version, E, N, P, ids, coords, tags, fields)


def write_vtk(path, coords, fields=None):
    """Legacy ASCII VTK point cloud + hex cells over the GLL sub-lattice."""
    E, _, n, _, _ = coords.shape
    pts = np.moveaxis(coords, 1, -1).reshape(-1, 3)
    cells = []
    for e in range(E):
        base = e * n**3
        for k in range(n - 1):
            for j in range(n - 1):
                for i in range(n - 1):
                    idx = lambda a, b, c: base + (k + c) * n * n + (j + b) * n + (i + a)  # noqa: E731
                    cells.append((idx(0, 0, 0), idx(1, 0, 0), idx(1, 1, 0), idx(0, 1, 0),
                                  idx(0, 0, 1), idx(1, 0, 1), idx(1, 1, 1), idx(0, 1, 1)))
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nsemflow\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {len(pts)} double\n")
        np.savetxt(fh, pts, fmt="%.10e")
        fh.write(f"CELLS {len(cells)} {9 * len(cells)}\n")
        np.savetxt(fh, np.column_stack([np.full(len(cells), 8), np.array(cells)]), fmt="%d")
        fh.write(f"CELL_TYPES {len(cells)}\n")
        np.savetxt(fh, np.full(len(cells), 12), fmt="%d")
        if fields:
            fh.write(f"POINT_DATA {len(pts)}\n")
            for name, arr in fields.items():
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                np.savetxt(fh, np.asarray(arr).reshape(-1), fmt="%.10e")
