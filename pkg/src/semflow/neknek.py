"""Overset (multi-session) Schwarz coupling and single-session CHT meshes.

Every rank belongs to one session.  Interface nodes of a session are
located once in the *other* sessions through a point-location object built
on the global communicator; each step the donors interpolate their current
fields there and the receiver applies the values (possibly extrapolated in
time) as Dirichlet data on its interface faces.
"""

from __future__ import annotations

import copy
import logging
import math
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from .comm import Communicator
from .findpts import NOT_FOUND, Findpts
from .mesh import FACE_SIDES, GlobalMesh, MeshPartition, TopologyError, face_slices, number_points
from .timestepper import (BC, FlowState, MaterialProps, Solvers, advance_flow, advance_scalar, bdf_ext_coeffs,
                          finish_step)

log = logging.getLogger("semflow.neknek")

KINDS = ("fluid_cht", "solid")


class CouplingError(RuntimeError):
    pass


class SessionFailure(RuntimeError):
    def __init__(self, session_id, exc):
        super().__init__(f"session {session_id} failed: {exc!r}")
        self.session_id = session_id


@dataclass
class Session:
    id: int
    kind: str
    mesh: MeshPartition
    comm: Communicator
    solvers: Solvers
    state: FlowState
    interface: str = "interface"
    props: MaterialProps | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown session kind {self.kind!r}; expected one of {KINDS}")


def split_sessions(gcomm: Communicator, rank_counts):
    """Contiguous rank blocks per session; returns ``(session_id, session_comm)``."""
    counts = [int(c) for c in rank_counts]
    if sum(counts) != gcomm.size or min(counts) < 1:
        raise CouplingError(f"session rank counts {counts} do not cover {gcomm.size} ranks")
    bounds = np.cumsum(counts)
    sid = int(np.searchsorted(bounds, gcomm.rank, side="right"))
    return sid, gcomm.split(sid, gcomm.rank)


@dataclass
class InterfaceExchange:
    session: Session
    gcomm: Communicator
    finder: Findpts
    result: object
    positions: np.ndarray
    fields: tuple
    order: int = 0
    corrections: int = 0
    history: list = field(default_factory=list)  # [(t, values (nf, npts))], newest first
    own_ranks: tuple = ()

    def values_at(self, t):
        """Interface data for time ``t``: k-th order extrapolant of the history."""
        if not self.history:
            raise CouplingError("no interface data received yet")
        if math.isclose(self.history[0][0], t, rel_tol=0, abs_tol=1e-14 * max(1.0, abs(t))) or self.order == 0:
            return self.history[0][1]
        k = min(self.order, len(self.history) - 1)
        if k < self.order:
            log.info("session %d: interface history holds %d levels, extrapolating at order %d instead of %d",
                     self.session.id, len(self.history), k, self.order)
        if k == 0:
            return self.history[0][1]
        times = [h[0] for h in self.history[: k + 1]]
        dts = [t - times[0]] + [a - b for a, b in zip(times[:-1], times[1:])]
        _, ext = bdf_ext_coeffs(k + 1, dts)
        return sum(ext[j] * self.history[j][1] for j in range(k + 1))


def _interface_positions(session: Session):
    return np.flatnonzero(session.solvers.tag_mask(session.interface).ravel())


def _donor_fields(session: Session, names):
    st = session.state
    shape = session.mesh.coords[:, 0].shape
    out = []
    for name in names:
        if name == "T":
            out.append(st.T if st.T is not None else np.zeros(shape))
        else:
            c = "uvw".index(name)
            out.append(st.u[c] if st.u is not None else np.zeros(shape))
    return np.stack(out)


def couple_setup(session: Session, gcomm: Communicator, fields=("T",), order=0, corrections=None,
                 padding=1e-2) -> InterfaceExchange:
    """Collective over ``gcomm``: locate this session's interface nodes in the others."""
    if order not in (0, 1, 2):
        raise CouplingError(f"interface extrapolation order must be 0, 1 or 2, got {order}")
    if corrections is None:
        corrections = 0 if order == 0 else 1
    if order > 0 and corrections < 1:
        raise CouplingError("extrapolation order k > 0 needs at least one correction iteration")
    sids = gcomm.allgather(session.id)
    own = tuple(r for r, s in enumerate(sids) if s == session.id)
    finder = Findpts(session.mesh, gcomm, padding=padding)
    pos = _interface_positions(session)
    X = np.moveaxis(session.mesh.coords, 1, -1).reshape(-1, 3)[pos]
    res = finder.find(X, exclude=set(own))
    bad = np.flatnonzero(res.status == NOT_FOUND)
    nbad = gcomm.allreduce(int(bad.size), "sum")
    if nbad:
        detail = "; ".join(f"({x[0]:.6g}, {x[1]:.6g}, {x[2]:.6g}) nearest {d:.3e}"
                           for x, d in zip(X[bad][:5], res.distance[bad][:5]))
        raise CouplingError(f"{nbad} interface points not found in any donor session"
                            + (f": session {session.id}: {detail}" if bad.size else ""))
    ex = InterfaceExchange(session, gcomm, finder, res, pos, tuple(fields), order, corrections, [], own)
    exchange(ex, session.state.t)
    apply_interface(ex, session.state.t)
    return ex


def exchange(ex: InterfaceExchange, t, replace=False, timers=None):
    """Collective: donors interpolate their fields at every other session's points."""
    timer = timers or (lambda name: nullcontext())
    ex.finder.timers = timers
    with timer("exchange"):
        vals = ex.finder.eval(_donor_fields(ex.session, ex.fields), ex.result)
    vals = np.atleast_2d(vals)
    if replace and ex.history:
        ex.history[0] = (t, vals)
    else:
        ex.history.insert(0, (t, vals))
        del ex.history[max(ex.order + 1, 1):]
    return vals


def apply_interface(ex: InterfaceExchange, t):
    """Install interface values for time ``t`` as Dirichlet data."""
    S = ex.session.solvers
    shape = ex.session.mesh.coords[:, 0].shape
    vals = ex.values_at(t)
    tag = ex.session.interface
    for i, name in enumerate(ex.fields):
        if name == "T":
            arr = np.zeros(shape)
            arr.ravel()[ex.positions] = vals[i]
            S.scalar_bcs[tag] = BC("dirichlet", arr)
    vel = [n for n in ex.fields if n in ("u", "v", "w")]
    if vel and ex.session.kind == "fluid_cht":
        arr = np.zeros((3,) + shape)
        for i, name in enumerate(ex.fields):
            if name in ("u", "v", "w"):
                arr["uvw".index(name)].ravel()[ex.positions] = vals[i]
        S.velocity_bcs[tag] = BC("dirichlet", arr)


def _advance(session: Session, dt):
    st = session.state
    S = session.solvers
    if session.kind == "fluid_cht":
        if st.T is not None:
            advance_scalar(st, dt, None, S, with_advection=True)
        if st.u is not None and not math.isinf(dt):
            advance_flow(st, dt, S)
    else:
        advance_scalar(st, dt, None, S, with_advection=False)
    finish_step(st, dt)


def step_coupled(ex: InterfaceExchange, dt, timers=None):
    """Advance this rank's session by ``dt`` and exchange interface data.

    ``dt = inf`` performs one steady Schwarz sweep.  With ``order > 0`` the
    step is repeated ``corrections`` times with the freshly exchanged data.
    """
    session = ex.session
    timer = timers or (lambda name: nullcontext())
    t_new = session.state.t if math.isinf(dt) else session.state.t + dt
    snapshot = copy.deepcopy(session.state) if ex.order > 0 else None
    apply_interface(ex, t_new)
    _guarded(session, dt, ex.gcomm)
    for it in range(ex.corrections + 1):
        with timer("neknek"):
            with timer("sync"):
                ex.gcomm.barrier()
            exchange(ex, session.state.t, replace=it > 0, timers=timers)
        if it == ex.corrections:
            break
        session.state = copy.deepcopy(snapshot)
        apply_interface(ex, t_new)
        _guarded(session, dt, ex.gcomm)
    return session.state


def _guarded(session, dt, gcomm):
    err = None
    try:
        _advance(session, dt)
    except Exception as exc:  # noqa: BLE001 - reported to every session below
        err = exc
    bad = gcomm.allgather(session.id if err is not None else -1)
    failing = sorted({b for b in bad if b >= 0})
    if failing:
        if err is not None:
            raise SessionFailure(session.id, err) from err
        raise SessionFailure(failing[0], RuntimeError("peer session step failed"))


def interface_residual(ex: InterfaceExchange):
    """Max difference between current interface values and donor data."""
    vals = ex.history[0][1]
    own = _donor_fields(ex.session, ex.fields).reshape(len(ex.fields), -1)[:, ex.positions]
    local = float(np.max(np.abs(own - vals))) if vals.size else 0.0
    return ex.gcomm.allreduce(local, "max")


# ---------------------------------------------------------------------------
# conjugate heat transfer on one conforming mesh

FLUID, SOLID = 0, 1


@dataclass
class ChtDomain:
    mesh: GlobalMesh
    fluid_elements: np.ndarray
    solid_elements: np.ndarray


def cht_bind(fluid: GlobalMesh, solid: GlobalMesh) -> ChtDomain:
    """Union of a fluid mesh and a conforming solid skin (region 0 / 1).

    Raises ``TopologyError`` if a solid face lies on the fluid boundary
    without matching a fluid face node for node.
    """
    if fluid.order != solid.order:
        raise TopologyError(f"fluid order {fluid.order} differs from solid order {solid.order}")
    N = fluid.order
    coords = np.concatenate([fluid.coords, solid.coords])
    tags = np.concatenate([fluid.tags, solid.tags]).copy()
    region = np.concatenate([np.full(fluid.E, FLUID), np.full(solid.E, SOLID)])
    tol = 1e-9 * max(fluid.diameter, solid.diameter)
    pts = np.moveaxis(coords, 1, -1).reshape(-1, 3)
    gid, _ = number_points(pts, tol)
    gid = gid.reshape(coords.shape[0], -1)
    n = N + 1
    sl = face_slices(N)
    idx = np.arange(n**3).reshape(n, n, n)
    face_idx = [idx[s].ravel() for s in sl]
    fluid_faces = {frozenset(gid[e, face_idx[f]].tolist()): (e, f) for e in range(fluid.E) for f in range(6)}
    fluid_nodes = set(gid[: fluid.E].ravel().tolist())
    # fluid boundary faces as axis-aligned boxes, for detecting overlap without shared nodes
    fb = []
    for e in range(fluid.E):
        for f in range(6):
            if tags[e, f]:
                P = np.moveaxis(fluid.coords[e][(slice(None),) + sl[f]], 0, -1).reshape(-1, 3)
                fb.append((P.min(axis=0) - tol, P.max(axis=0) + tol))
    for e in range(fluid.E, coords.shape[0]):
        for f in range(6):
            ids = gid[e, face_idx[f]]
            shared = sum(1 for g in ids.tolist() if g in fluid_nodes)
            if shared == ids.size:
                match = fluid_faces.get(frozenset(ids.tolist()))
                if match is None:
                    raise TopologyError(f"solid element {e - fluid.E} face {FACE_SIDES[f]} is not a fluid face")
                # the shared face is interior to the union
                tags[e, f] = ""
                tags[match] = ""
                continue
            P = np.moveaxis(coords[e][(slice(None),) + sl[f]], 0, -1).reshape(-1, 3)
            c = P.mean(axis=0)
            for lo, hi in fb:
                if np.all(c >= lo) and np.all(c <= hi) and np.any(hi - lo <= 2 * tol + 1e-12):
                    raise TopologyError(
                        f"solid element {e - fluid.E} face {FACE_SIDES[f]} touches the fluid boundary "
                        f"nonconformingly ({shared} of {ids.size} nodes shared)"
                    )
    ids = np.concatenate([fluid.ids, solid.ids + fluid.E])
    mesh = GlobalMesh(coords, N, tags, region, ids)
    return ChtDomain(mesh, np.arange(fluid.E), np.arange(fluid.E, coords.shape[0]))
