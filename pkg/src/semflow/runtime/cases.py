"""Build and run a configured case on the in-process rank harness."""

from __future__ import annotations

import io
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .. import variants
from ..comm import HarnessError, spawn
from ..mesh import (FACE_SIDES, GeometryError, PartitionError, TopologyError, build_global_box, deform_global,
                    write_container, write_vtk)
from ..neknek import (CouplingError, Session, SessionFailure, cht_bind, couple_setup, interface_residual,
                      split_sessions, step_coupled)
from ..solver import ConfigurationError, OperatorError, SolverError
from ..timestepper import (BC, FlowState, IntegratorError, MaterialProps, Solvers, SolverSettings, StepFailure,
                           advance_flow, advance_scalar, finish_step, kinetic_energy)
from .autotune import autotune, representative_inputs
from .config import BC_KEYS, CaseConfig, ConfigError
from .timers import TimerTree, format_stats, percent_check

log = logging.getLogger("semflow.cases")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_HARNESS = 0, 2, 3, 4
CONFIG_ERRORS = (ConfigError, ConfigurationError, IntegratorError, PartitionError, TopologyError, CouplingError)
NUMERICAL_ERRORS = (StepFailure, OperatorError, SolverError, GeometryError, FloatingPointError)

SIDE_OF = dict(zip(BC_KEYS, FACE_SIDES))

SOURCES = {
    "manufactured": lambda x, y, z, t: 3 * np.pi**2 * np.sin(np.pi * x) * np.sin(np.pi * y) * np.sin(np.pi * z),
    "sinx": lambda x, y, z, t: np.pi**2 * np.sin(np.pi * x),
}


def _source(text):
    try:
        return float(text)
    except ValueError:
        pass
    if text not in SOURCES:
        raise ConfigError(f"unknown source {text!r}; use a number or one of {', '.join(SOURCES)}")
    return SOURCES[text]


def _settings(sec) -> SolverSettings:
    return SolverSettings(tol=sec["residualTol"], maxit=sec["maxIterations"], preconditioner=sec["preconditioner"],
                          schedule=list(sec["pMGSchedule"]) if sec["pMGSchedule"] else None,
                          cheb_order=sec["chebyshevOrder"], projection=sec["projectionL"],
                          precision=sec["precision"])


def _domain(d):
    return ((d[0], d[1]), (d[2], d[3]), (d[4], d[5]))


def _scalar_bcs(spec: dict):
    """Map ``bcXmin = dirichlet 1`` style entries to face-tag BCs."""
    out = {}
    for key, bc in spec.items():
        side = SIDE_OF[key]
        if bc[0] == "dirichlet":
            out[side] = BC("dirichlet", bc[1])
        elif bc[0] == "neumann":
            out[side] = BC("neumann", bc[1])
    return out


def _deform(gm, amp, domain):
    if amp == 0:
        return gm
    (x0, x1), (y0, y1), (z0, z1) = domain

    def fn(x, y, z):
        sx = np.sin(np.pi * (x - x0) / (x1 - x0))
        sy = np.sin(np.pi * (y - y0) / (y1 - y0))
        sz = np.sin(np.pi * (z - z0) / (z1 - z0))
        return (x + amp * (x1 - x0) * sy * sz, y + amp * (y1 - y0) * sx * sz, z + amp * (z1 - z0) * sx * sy)

    return deform_global(gm, fn)


# ---------------------------------------------------------------------------
# per-rank problem setup


@dataclass
class Problem:
    """What a rank steps: one mesh, its solvers and state, plus optional coupling."""

    mesh: object
    solvers: Solvers
    state: FlowState
    step: object
    metrics: object = None
    exchange: object = None
    session: int = 0
    fields: dict = field(default_factory=dict)
    session_obj: object = None


def _tg_exact(nu):
    def ex(x, y, z, t):
        f = np.exp(-2 * nu * t)
        return (np.sin(x) * np.cos(y) * f, -np.cos(x) * np.sin(y) * f, 0 * x)

    return ex


def _setup_conduction(cfg, comm, tt):
    g, m = cfg["GENERAL"], cfg["MESH"]
    p = cfg["PROBLEM"]
    dom = _domain(m["domain"])
    gm = _deform(build_global_box(m["elements"], dom, cfg.N), m["deformAmplitude"], dom)
    mesh = gm.partition(comm.size)[comm.rank]
    mesh.setup_gs(comm)
    props = MaterialProps(p["Re"], p["Pr"], rho_cp={0: p["solidRhoCp"]}, conductivity={0: p["solidConductivity"]})
    bcs = _scalar_bcs({k: p[k] for k in BC_KEYS})
    S = Solvers(mesh, props, g["integratorOrder"], cfg.Nq, scalar_bcs=bcs, scalar=_settings(cfg["SCALAR"]),
                pressure=_settings(cfg["PRESSURE"]), velocity=_settings(cfg["VELOCITY"]), timers=tt)
    st = FlowState(T=np.full(mesh.coords[:, 0].shape, p["initialTemperature"]), q=_source(p["source"]))

    def step(dt):
        advance_scalar(st, dt, None, S, with_advection=False)
        finish_step(st, dt)

    return Problem(mesh, S, st, step, fields={"T": lambda: st.T})


def _setup_taylor_green(cfg, comm, tt):
    g, m, p = cfg["GENERAL"], cfg["MESH"], cfg["PROBLEM"]
    dom = _domain(m["domain"])
    gm = build_global_box(m["elements"], dom, cfg.N)
    mesh = gm.partition(comm.size)[comm.rank]
    mesh.setup_gs(comm)
    props = MaterialProps(p["Re"], p["Pr"])
    ex = _tg_exact(props.nu)
    bcs = {s: BC("dirichlet", ex) for s in ("x-", "x+", "y-", "y+")}
    bcs.update({s: BC("symmetry") for s in ("z-", "z+")})
    S = Solvers(mesh, props, g["integratorOrder"], cfg.Nq, velocity_bcs=bcs, pressure=_settings(cfg["PRESSURE"]),
                velocity=_settings(cfg["VELOCITY"]), scalar=_settings(cfg["SCALAR"]), timers=tt)
    X = mesh.coords
    st = FlowState(u=np.array(ex(X[:, 0], X[:, 1], X[:, 2], 0.0)))
    ke0 = kinetic_energy(S, st.u)

    def step(dt):
        advance_flow(st, dt, S)
        finish_step(st, dt)

    def metrics():
        ke = kinetic_energy(S, st.u)
        exact = ke0 * math.exp(-4 * props.nu * st.t)
        return {"ke": ke, "ke_exact": exact, "rel_err": ke / exact - 1.0}

    return Problem(mesh, S, st, step, metrics, fields={"u": lambda: st.u, "p": lambda: st.p})


def _setup_cht(cfg, comm, tt):
    """Plug flow in a channel with a heated solid skin on its upper wall.

    The skin covers the middle half of the channel, is a quarter of the
    channel height thick and receives the ``bcYmax`` Neumann flux on top.
    The inlet (``x-``) holds ``bcXmin`` Dirichlet data; all other walls
    are insulated.
    """
    g, m, p = cfg["GENERAL"], cfg["MESH"], cfg["PROBLEM"]
    Ex, Ey, Ez = m["elements"]
    (x0, x1), (y0, y1), (z0, z1) = dom = _domain(m["domain"])
    if Ex % 4:
        raise ConfigError("cht cases need a multiple of 4 elements along x")
    N = cfg.N
    blank = {s: "" for s in FACE_SIDES}
    fl = build_global_box((Ex, Ey, Ez), dom, N, tags={**blank, "x-": "inlet", "x+": "outlet"})
    L = x1 - x0
    sdom = ((x0 + L / 4, x1 - L / 4), (y1, y1 + (y1 - y0) / 4), (z0, z1))
    so = build_global_box((Ex // 2, 1, Ez), sdom, N, tags={**blank, "y+": "heated"})
    mesh_g = cht_bind(fl, so).mesh
    mesh = mesh_g.partition(comm.size)[comm.rank]
    mesh.setup_gs(comm)
    props = MaterialProps(p["Re"], p["Pr"], rho_cp={1: p["solidRhoCp"]}, conductivity={1: p["solidConductivity"]})
    inlet = p["bcXmin"]
    heat = p["bcYmax"]
    flux = heat[1] if heat[0] == "neumann" else 1.0
    bcs = {"inlet": BC("dirichlet", inlet[1] if inlet[0] == "dirichlet" else 0.0), "heated": BC("neumann", flux)}
    S = Solvers(mesh, props, g["integratorOrder"], cfg.Nq, scalar_bcs=bcs, scalar=_settings(cfg["SCALAR"]),
                timers=tt)
    u = np.zeros((3,) + mesh.coords[:, 0].shape)
    u[0][mesh.region == 0] = 1.0
    st = FlowState(u=u, T=np.full(mesh.coords[:, 0].shape, p["initialTemperature"]))
    area_out, _ = mesh.faces("outlet")
    area_in, _ = mesh.faces("heated")
    q_in = comm.allreduce(float(np.sum(area_in) * flux), "sum")
    T_in = bcs["inlet"].value

    def step(dt):
        advance_scalar(st, dt, None, S, with_advection=True)
        finish_step(st, dt)

    def metrics():
        out = comm.allreduce(float(np.sum(area_out * (st.T - T_in))), "sum")
        return {"heat_in": q_in, "enthalpy_out": out, "balance": out / q_in - 1.0}

    return Problem(mesh, S, st, step, metrics, fields={"T": lambda: st.T})


def _setup_overset(cfg, comm, tt):
    g, p = cfg["GENERAL"], cfg["PROBLEM"]
    counts = [s["ranks"] for s in cfg.sessions]
    sid, scomm = split_sessions(comm, counts)
    s = cfg.sessions[sid]
    N = s["polynomialOrder"] or cfg.N
    tags = {SIDE_OF[k]: "interface" for k in BC_KEYS if s[k][0] == "interface"}
    if not tags:
        raise ConfigError(f"session {sid} has no face marked 'interface'")
    dom = _domain(s["domain"])
    gm = build_global_box(s["elements"], dom, N, tags=tags)
    mesh = gm.partition(scomm.size)[scomm.rank]
    mesh.setup_gs(scomm)
    props = MaterialProps(p["Re"], p["Pr"], rho_cp={0: p["solidRhoCp"]}, conductivity={0: p["solidConductivity"]})
    bcs = _scalar_bcs({k: s[k] for k in BC_KEYS if s[k][0] != "interface"})
    S = Solvers(mesh, props, g["integratorOrder"], cfg.Nq, scalar_bcs=bcs, scalar=_settings(cfg["SCALAR"]),
                timers=tt)
    st = FlowState(T=np.full(mesh.coords[:, 0].shape, p["initialTemperature"]), q=_source(p["source"]))
    ses = Session(sid, s["kind"], mesh, scomm, S, st)
    ex = couple_setup(ses, comm, order=s["extrapolationOrder"], corrections=s["corrections"])

    def step(dt):
        step_coupled(ex, dt, timers=tt)

    def metrics():
        return {"interface_residual": interface_residual(ex)}

    # step_coupled may replace the session state, so fields are read through the session
    return Problem(mesh, S, st, step, metrics, ex, sid, {"T": lambda: ses.state.T}, ses)


SETUPS = {"conduction": _setup_conduction, "taylor_green": _setup_taylor_green, "cht": _setup_cht,
          "overset": _setup_overset}


# ---------------------------------------------------------------------------
# output


def _gather_fields(comm, mesh, fields):
    local = {k: np.asarray(v()) for k, v in fields.items() if v() is not None}
    parts = comm.allgather((mesh.ids, mesh.coords, mesh.tags, local))
    if comm.rank != 0:
        return None
    ids = np.concatenate([p[0] for p in parts])
    coords = np.concatenate([p[1] for p in parts])
    tags = np.concatenate([p[2] for p in parts])
    out = {}
    for k in parts[0][3]:
        arrs = [p[3][k] for p in parts]
        out[k] = np.concatenate(arrs, axis=-4)
    return ids, coords, tags, out


def _write_snapshot(comm, prob, outdir, step, P, prefix="snap"):
    got = _gather_fields(comm, prob.mesh, prob.fields)
    if got is None:
        return None
    ids, coords, tags, fields = got
    base = os.path.join(outdir, f"{prefix}_{step:06d}")
    write_container(base + ".msem", ids, coords, tags, prob.mesh.order, P, fields)
    scalars = {}
    for k, v in fields.items():
        if v.ndim == 5:
            for c in range(v.shape[0]):
                scalars[f"{k}{'xyz'[c]}"] = v[c]
        else:
            scalars[k] = v
    write_vtk(base + ".vtk", coords, scalars)
    return base + ".msem"


@dataclass
class CaseResult:
    status: int
    E: int = 0
    N: int = 0
    n: int = 0
    steps: int = 0
    ranks: int = 0
    flops_per_rank: float = 0.0
    seconds_per_step: float = 0.0
    snapshots: list = field(default_factory=list)
    stats_blocks: int = 0
    percent_ok: bool = True
    tuning: dict = field(default_factory=dict)
    message: str = ""

    def summary(self) -> str:
        return (
            "summary:\n"
            f"  elements E              {self.E}\n"
            f"  polynomial order N      {self.N}\n"
            f"  gridpoints n = E*N^3    {self.n}\n"
            f"  ranks                   {self.ranks}\n"
            f"  steps                   {self.steps}\n"
            f"  time/step               {self.seconds_per_step:.5e}s\n"
            f"  flops/rank              {self.flops_per_rank:.5e}\n"
        )


def _rank_program(comm, cfg: CaseConfig, outdir, stats_interval, force, write, tune_seed, stream):
    tt = TimerTree()
    g = cfg["GENERAL"]
    prob = SETUPS[cfg["PROBLEM"]["type"]](cfg, comm, tt)
    root = comm.rank == 0
    tuning = {}
    if g["autotune"]:
        inputs = representative_inputs(prob.mesh, tune_seed)
        report = autotune(variants.registry, {k: v for k, v in inputs.items() if k not in force}, comm)
        tuning = {op: variants.registry.current_name(op) for op in report.chosen}
        if root:
            stream.write(report.format())
    for op, idx in force.items():
        variants.registry.select(op, idx)
        tuning[op] = variants.registry.current_name(op)
    metrics_fh = open(os.path.join(outdir, "metrics.csv"), "w") if (root and write and prob.metrics) else None
    keys = None
    snaps = []
    blocks = 0
    pct_ok = True
    dt = g["dt"]
    nsteps = g["numSteps"]
    P = comm.size
    prefix = f"snap_s{prob.session}" if prob.exchange is not None else "snap"
    if prob.exchange is not None:
        # only one rank per session writes; the session communicator gathers
        scomm = prob.session_obj.comm
    else:
        scomm = comm

    def emit(step):
        nonlocal blocks, pct_ok
        tt.flops = prob.solvers.flops()
        text = format_stats(tt, step, comm=comm)
        if root:
            stream.write(text)
        blocks += 1
        pct_ok &= percent_check(text)

    t_start = time.perf_counter()
    try:
        for i in range(1, nsteps + 1):
            with tt.step():
                prob.step(dt)
            if prob.metrics is not None:
                m = prob.metrics()
                if metrics_fh is not None:
                    if keys is None:
                        keys = list(m)
                        metrics_fh.write(",".join(["step", "t"] + keys) + "\n")
                    t = prob.session_obj.state.t if prob.exchange is not None else prob.state.t
                    metrics_fh.write(",".join([str(i), repr(t)] + [repr(float(m[k])) for k in keys]) + "\n")
            if write and g["writeInterval"] > 0 and i % g["writeInterval"] == 0:
                name = _snap(scomm, prob, outdir, i, prefix)
                if name:
                    snaps.append(name)
            if stats_interval > 0 and i % stats_interval == 0:
                emit(i)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    elapsed = time.perf_counter() - t_start
    if stats_interval <= 0 or nsteps % stats_interval != 0 or nsteps == 0:
        emit(nsteps)
    if write and (g["writeInterval"] <= 0 or nsteps % g["writeInterval"] != 0):
        name = _snap(scomm, prob, outdir, nsteps, prefix)
        if name:
            snaps.append(name)
    N = prob.mesh.order
    E = comm.allreduce(prob.mesh.E, "sum")
    n = comm.allreduce(prob.mesh.E * N**3, "sum")
    flops = comm.allreduce(float(prob.solvers.flops()), "sum") / P
    snaps = [s for lst in comm.allgather(snaps) for s in lst]
    return CaseResult(EXIT_OK, E, N, n, nsteps, P, flops,
                      comm.allreduce(elapsed, "max") / max(nsteps, 1), snaps, blocks, pct_ok, tuning)


def _snap(scomm, prob, outdir, step, prefix):
    return _write_snapshot(scomm, prob, outdir, step, scomm.size, prefix)


class _Tee(io.TextIOBase):
    def __init__(self, *streams):
        self.streams = streams

    def write(self, s):
        for st in self.streams:
            st.write(s)
        return len(s)

    def flush(self):
        for st in self.streams:
            st.flush()


def classify(exc) -> int:
    """Exit status for an exception escaping a run."""
    while True:
        if isinstance(exc, HarnessError):
            exc = exc.exc
        elif isinstance(exc, SessionFailure) and exc.__cause__ is not None:
            exc = exc.__cause__
        else:
            break
    if isinstance(exc, CONFIG_ERRORS):
        return EXIT_CONFIG
    if isinstance(exc, NUMERICAL_ERRORS):
        return EXIT_NUMERICAL
    return EXIT_HARNESS


def _root_cause(exc):
    while isinstance(exc, HarnessError) or (isinstance(exc, SessionFailure) and exc.__cause__ is not None):
        exc = exc.exc if isinstance(exc, HarnessError) else exc.__cause__
    return exc


def execute_case(cfg: CaseConfig, output_dir, ranks=None, seed=None, scheduler=None, stats_interval=None,
                 force_variants=None, stream=None, write=True) -> CaseResult:
    """Run ``cfg`` and return the rank-0 result; exceptions propagate."""
    comm_sec = cfg["COMM"]
    P = ranks or comm_sec["ranks"]
    if cfg["PROBLEM"]["type"] == "overset":
        total = sum(s["ranks"] for s in cfg.sessions)
        if ranks and ranks != total:
            raise ConfigError(f"--ranks {ranks} does not match the {total} ranks of the session blocks")
        P = total
    seed = comm_sec["seed"] if seed is None else seed
    scheduler = scheduler or comm_sec["scheduler"]
    K = cfg["GENERAL"]["statsInterval"] if stats_interval is None else stats_interval
    force = dict(force_variants or {})
    for op, idx in force.items():
        if op not in variants.registry.ops or not 0 <= idx < len(variants.registry.ops[op]):
            raise ConfigError(f"--force-variant: no variant {idx} for operation {op!r}")
    os.makedirs(output_dir, exist_ok=True)
    saved = dict(variants.registry.selected)
    with open(os.path.join(output_dir, "logfile.txt"), "w") as logfh:
        out = _Tee(logfh, stream) if stream is not None else logfh
        out.write("case configuration (defaults applied):\n" + cfg.echo() + "\n")
        try:
            results = spawn(P, _rank_program, cfg, output_dir, K, force, write, seed, out, seed=seed,
                            scheduler=scheduler)
        finally:
            variants.registry.selected.update(saved)
        res = results[0]
        out.write(res.summary())
    with open(os.path.join(output_dir, "summary.json"), "w") as fh:
        json.dump({k: v for k, v in res.__dict__.items()}, fh, indent=1)
    return res


def run_case(config, output_dir, **kw) -> int:
    """Run a case; return the exit status and print a diagnostic on failure."""
    stream = kw.pop("stream", sys.stdout)
    try:
        res = execute_case(config, output_dir, stream=stream, **kw)
    except Exception as exc:  # noqa: BLE001 - every stage failure maps to an exit status
        code = classify(exc)
        cause = _root_cause(exc)
        kind = {EXIT_CONFIG: "configuration", EXIT_NUMERICAL: "numerical", EXIT_HARNESS: "harness"}[code]
        label = "partition error" if isinstance(cause, PartitionError) else f"{kind} error"
        print(f"semflow: {label}: {cause}", file=sys.stderr)
        log.debug("run failed", exc_info=exc)
        return code
    return res.status


# ---------------------------------------------------------------------------
# scaling study


def scaling_study(cfg: CaseConfig, ranks_list, output_dir, stream=None):
    """Time the case at each rank count; efficiency relative to the smallest P.

    Returns ``(rows, n08)`` where each row is ``(P, n/P, seconds/step,
    efficiency)`` and ``n08`` is the points per rank where the efficiency
    curve crosses 0.8 (log-linear interpolation), or None if it never does.
    """
    rows = []
    base = None
    for P in sorted(ranks_list):
        res = execute_case(cfg, os.path.join(output_dir, f"P{P}"), ranks=P, write=False, stats_interval=0)
        if base is None:
            base = (P, res.seconds_per_step)
        eff = base[0] * base[1] / (P * res.seconds_per_step) if res.seconds_per_step > 0 else float("nan")
        rows.append((P, res.n / P, res.seconds_per_step, eff))
    n08 = None
    for (p0, n0, _, e0), (p1, n1, _, e1) in zip(rows, rows[1:]):
        if e0 >= 0.8 > e1:
            f = (e0 - 0.8) / (e0 - e1)
            n08 = math.exp(math.log(n0) + f * (math.log(n1) - math.log(n0)))
            break
    if stream is not None:
        stream.write(f"{'ranks':>6}{'n/P':>14}{'time/step':>14}{'efficiency':>12}\n")
        for P, npp, t, e in rows:
            stream.write(f"{P:6d}{npp:14.1f}{t:14.5e}{e:12.3f}\n")
        stream.write(f"n0.8 = {n08:.1f}\n" if n08 is not None else "n0.8 = not reached (efficiency stays >= 0.8)\n")
    return rows, n08
