"""BDFk/EXTk time advancement of temperature and incompressible flow.

Flow uses a PN-PN splitting: explicit (extrapolated) dealiased advection,
a pressure Poisson solve whose right-hand side carries the rotational
(curl-curl) viscous term and the normal velocity on Dirichlet boundaries,
then one Helmholtz solve per velocity component.  Dirichlet data are
imposed by lifting and masking; Neumann (flux) data by surface quadrature.
A step with ``dt = inf`` drops the time derivative and solves the steady
problem, which the overset driver uses for Schwarz sweeps.
"""

from __future__ import annotations

import math
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from . import variants
from .mesh import MeshPartition, geom_factors
from .reference import dealias_order, interp3, local_grad, local_grad_t, registry
from .solver import HelmholtzOp, PMGHierarchy, ProjectionSpace, jacobi, pcg
from .solver.chebyshev import ConfigurationError


class IntegratorError(ValueError):
    pass


class StepFailure(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# coefficients


def bdf_ext_coeffs(k: int, dts):
    """Variable-step BDF and extrapolation weights.

    ``dts`` lists step sizes newest first: ``dts[0] = t^{n+1} - t^n``,
    ``dts[1] = t^n - t^{n-1}``, ...  Returns ``bdf`` (k+1 values, already
    divided by time) with ``du/dt(t^{n+1}) ~ sum_j bdf[j] u^{n+1-j}`` and
    ``ext`` (k values) with ``f(t^{n+1}) ~ sum_j ext[j] f^{n-j}``.
    """
    if k not in (1, 2, 3):
        raise IntegratorError(f"unsupported integrator order {k}; use 1, 2 or 3")
    if np.isscalar(dts):
        dts = [float(dts)] * k
    dts = [float(d) for d in dts][:k]
    if len(dts) < k:
        dts = dts + [dts[-1]] * (k - len(dts))
    if any(not d > 0 for d in dts):
        raise IntegratorError(f"time steps must be positive: {dts}")
    t = np.concatenate(([0.0], -np.cumsum(dts)))
    bdf = np.empty(k + 1)
    for j in range(k + 1):
        others = [t[m] for m in range(k + 1) if m != j]
        if j == 0:
            bdf[0] = sum(1.0 / (t[0] - tm) for tm in others)
        else:
            num = np.prod([t[0] - tm for tm in others if tm != t[0]])
            den = np.prod([t[j] - tm for tm in others])
            bdf[j] = num / den
    ext = np.empty(k)
    for j in range(1, k + 1):
        others = [t[m] for m in range(1, k + 1) if m != j]
        ext[j - 1] = np.prod([(t[0] - tm) / (t[j] - tm) for tm in others]) if others else 1.0
    return bdf, ext


# ---------------------------------------------------------------------------
# physical parameters and boundary conditions


@dataclass
class MaterialProps:
    """``Re``/``Pr`` for the fluid; per-region overrides for solids."""

    Re: float = 100.0
    Pr: float = 1.0
    rho_cp: dict = field(default_factory=dict)
    conductivity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.Re > 0 or not self.Pr > 0:
            raise ValueError(f"Re and Pr must be positive (Re={self.Re}, Pr={self.Pr})")

    @property
    def nu(self):
        return 1.0 / self.Re

    @property
    def alpha(self):
        return 1.0 / (self.Re * self.Pr)

    def fields(self, mesh: MeshPartition):
        shape = (mesh.E,) + (mesh.n,) * 3
        rc = np.ones(shape)
        k = np.full(shape, self.alpha)
        for reg, v in self.rho_cp.items():
            rc[mesh.region == reg] = v
        for reg, v in self.conductivity.items():
            k[mesh.region == reg] = v
        return rc, k


@dataclass
class BC:
    """``kind`` is ``dirichlet``, ``neumann`` or ``symmetry``.

    ``value`` is a constant, a callable ``f(x, y, z, t)`` or a full nodal
    array (used by the overset exchange).  For velocity Dirichlet data the
    value has three components.  Neumann values are the heat flux into the
    domain.
    """

    kind: str
    value: object = 0.0


def _eval_value(value, X, t, ncomp):
    shape = X.shape[:1] + X.shape[2:]
    if callable(value):
        out = value(X[:, 0], X[:, 1], X[:, 2], t)
    else:
        out = value
    out = np.asarray(out, dtype=float)
    if ncomp == 1:
        return np.broadcast_to(out, shape).astype(float)
    if out.shape == (ncomp,):
        return np.broadcast_to(out[:, None, None, None, None], (ncomp,) + shape).astype(float)
    return np.broadcast_to(out, (ncomp,) + shape).astype(float)


# ---------------------------------------------------------------------------
# dealiased advection


class Dealias:
    """Advection on the order-``Nq`` GLL lattice, projected back to order N."""

    def __init__(self, mesh: MeshPartition, Nq=None):
        N = mesh.order
        Nq = dealias_order(N) if Nq is None else int(Nq)
        if Nq < N:
            raise ConfigurationError(f"dealiasing order Nq={Nq} is below the mesh order N={N}")
        self.N, self.Nq = N, Nq
        self.J = registry.interp(N, Nq).entries
        self.D = registry.deriv(N).entries
        gq = geom_factors(interp3(self.J, mesh.coords), Nq, mesh.ids)
        self.drdx = gq.drdx
        self.mass = gq.mass
        self.working_set = (Nq + 1) ** 3
        self.nodal_set = (N + 1) ** 3
        self.calls = 0
        self.points = 0
        self.flops = 0

    def advect(self, u, phis):
        """Weak form ``int v (u . grad phi)`` for each field in ``phis``."""
        phis = np.asarray(phis)
        uq = interp3(self.J, u)
        out = np.empty_like(phis)
        for m in range(phis.shape[0]):
            dr = [interp3(self.J, d) for d in local_grad(phis[m], self.D)]
            c = 0.0
            for a in range(3):
                ga = self.drdx[:, 0, a] * dr[0] + self.drdx[:, 1, a] * dr[1] + self.drdx[:, 2, a] * dr[2]
                c = c + uq[a] * ga
            out[m] = interp3(self.J.T, self.mass * c)
            self.calls += 1
            self.points += uq.shape[1] * self.working_set
            E, n, nq = uq.shape[1], self.N + 1, self.Nq + 1
            # 3 derivatives, 3 + 1 lattice transfers and the pointwise products
            self.flops += E * (6 * n**4 + 8 * n * nq * (n * n + n * nq + nq * nq) + 20 * nq**3)
        return out


def makef(state: "FlowState", dealias: Dealias):
    """Weak advection term ``-(u . grad) u`` per velocity component."""
    return -dealias.advect(state.u, state.u)


def makeq(state: "FlowState", dealias: Dealias, rc=1.0):
    return -rc * dealias.advect(state.u, state.T[None])[0]


# ---------------------------------------------------------------------------
# state and solver bundle


@dataclass
class FlowState:
    u: np.ndarray | None = None
    p: np.ndarray | None = None
    T: np.ndarray | None = None
    q: object = 0.0
    t: float = 0.0
    step: int = 0
    dts: list = field(default_factory=list)
    u_prev: list = field(default_factory=list)
    F_hist: list = field(default_factory=list)
    T_prev: list = field(default_factory=list)
    Q_hist: list = field(default_factory=list)
    forcing: object = None


@dataclass
class SolverSettings:
    tol: float = 1e-6
    maxit: int = 500
    preconditioner: str = "jacobi"
    schedule: list | None = None
    cheb_order: int = 6
    projection: int = 0
    precision: str = "FP64"


def _null_timer(_name):
    return nullcontext()


class Solvers:
    """Operators, preconditioners and projection spaces for one mesh."""

    def __init__(self, mesh: MeshPartition, props: MaterialProps | None = None, order=2, Nq=None,
                 velocity_bcs=None, scalar_bcs=None, pressure=None, velocity=None, scalar=None,
                 timers=None, fluid_regions=(0,)):
        if mesh.gs is None:
            raise ConfigurationError("mesh partition needs a gather-scatter before building solvers")
        if order not in (1, 2, 3):
            raise IntegratorError(f"unsupported integrator order {order}")
        self.mesh = mesh
        self.props = props or MaterialProps()
        self.order = order
        self.velocity_bcs = dict(velocity_bcs or {})
        self.scalar_bcs = dict(scalar_bcs or {})
        self.pressure = pressure or SolverSettings(preconditioner="pmg", projection=8)
        self.velocity = velocity or SolverSettings()
        self.scalar = scalar or SolverSettings()
        self.timers = timers or _null_timer
        self.dealias = Dealias(mesh, Nq)
        self.rc, self.cond = self.props.fields(mesh)
        self.fluid = np.isin(mesh.region, list(fluid_regions))
        self.bmass = mesh.gs.apply(mesh.geom.mass)
        self.D = registry.deriv(mesh.order).entries
        self._ops = {}
        self._proj = {}
        self._pop = None
        self._pmg = None
        self.last_iterations = {}
        self._tag_masks = {}
        self._retired_flops = 0

    # -- helpers ----------------------------------------------------------------

    def tag_mask(self, tag):
        """Assembled boolean mask of nodes touching faces tagged ``tag``."""
        if tag not in self._tag_masks:
            m = self.mesh.boundary_mask([tag]).astype(float)
            self._tag_masks[tag] = self.mesh.gs.apply(m, "max") > 0
        return self._tag_masks[tag]

    def normal_component(self, tag):
        _, nA = self.mesh.faces(tag)
        tot = self.mesh.gs.comm.allreduce(np.abs(nA).sum(axis=(0, 2, 3, 4)), "sum")
        return int(np.argmax(tot))

    def grad(self, f):
        """Physical gradient of a nodal field, element-local ``(3, E, n, n, n)``."""
        dr = variants.registry.current("local_grad")(f, self.D)
        drdx = self.mesh.geom.drdx
        return np.stack([drdx[:, 0, a] * dr[0] + drdx[:, 1, a] * dr[1] + drdx[:, 2, a] * dr[2] for a in range(3)])

    def average(self, local):
        """Mass-weighted continuous projection of element-local values."""
        return self.mesh.gs.apply(self.mesh.geom.mass * local) / self.bmass

    def curl(self, u):
        g = [self.grad(u[c]) for c in range(3)]
        w = np.stack([g[2][1] - g[1][2], g[0][2] - g[2][0], g[1][0] - g[0][1]])
        return self.average(w)

    def _precond(self, op, settings, key):
        if settings.preconditioner == "pmg":
            H = PMGHierarchy(op, settings.schedule, settings.cheb_order, precision=settings.precision)
            return H
        if settings.preconditioner == "jacobi":
            return jacobi(op)
        if settings.preconditioner == "none":
            return None
        raise ConfigurationError(f"unknown preconditioner {settings.preconditioner!r} for {key}")

    def _op(self, key, build, settings):
        if key not in self._ops:
            op = build()
            self._ops[key] = (op, self._precond(op, settings, key))
            if settings.projection > 0:
                self._proj[key] = ProjectionSpace(op, settings.projection)
        return self._ops[key]

    def _retire(self, key):
        self._retired_flops += self._op_flops(*self._ops.pop(key))
        self._proj.pop(key, None)

    @staticmethod
    def _op_flops(op, M):
        total = op.flops
        for L in getattr(M, "levels", ()):
            if L is not op:
                total += L.flops
        return total

    def flops(self):
        """Operator and advection FLOPs counted on this rank so far."""
        live = sum(self._op_flops(op, M) for op, M in self._ops.values())
        return live + self._retired_flops + self.dealias.flops

    def _drop_stale(self, kind, keep):
        for key in [k for k in self._ops if k[0] == kind and k != keep]:
            self._retire(key)

    def pressure_op(self):
        key = ("p",)
        return self._op(key, lambda: HelmholtzOp(self.mesh, 1.0, 0.0, ()), self.pressure)

    def velocity_op(self, c, b0):
        tags = [t for t, bc in self.velocity_bcs.items()
                if bc.kind == "dirichlet" or (bc.kind == "symmetry" and self.normal_component(t) == c)]
        key = ("u", c, b0)
        self._drop_stale_velocity(c, key)
        return self._op(key, lambda: HelmholtzOp(self.mesh, self.props.nu, b0, tags), self.velocity)

    def _drop_stale_velocity(self, c, keep):
        for key in [k for k in self._ops if k[0] == "u" and k[1] == c and k != keep]:
            self._retire(key)

    def scalar_op(self, b0):
        tags = [t for t, bc in self.scalar_bcs.items() if bc.kind == "dirichlet"]
        key = ("T", b0)
        self._drop_stale("T", key)
        return self._op(key, lambda: HelmholtzOp(self.mesh, self.cond, b0 * self.rc, tags), self.scalar)

    def solve(self, key, op, M, rhs, settings, what):
        proj = self._proj.get(key)
        bnorm = op.norm(op.remove_mean(rhs * op.mask))
        x0 = None
        if proj is not None and len(proj):
            with self.timers("initial guess"):
                x0 = proj.guess(rhs)
        if M is not None and hasattr(M, "timers"):
            M.timers = self.timers
            inner = M

            def M(r):
                with self.timers("preconditioner"):
                    return inner(r)

        res = pcg(op, rhs, settings.tol, settings.maxit, M, x0=x0, rnorm0=bnorm)
        self.last_iterations[what] = res.iterations
        if not res.converged:
            raise StepFailure(
                f"{what} solve did not converge in {settings.maxit} iterations "
                f"(residual {res.residuals[-1]:.3e}, target {settings.tol * bnorm:.3e})",
                {"iterations": res.iterations, "residuals": res.residuals},
            )
        if proj is not None:
            with self.timers("initial guess"):
                proj.update(res.x)
        return res.x


def _lifted_solve(S: Solvers, key, op, M, rhs, lift, settings, what):
    """Solve with inhomogeneous Dirichlet data carried by ``lift``."""
    if lift is not None:
        rhs = rhs - S.mesh.gs.apply(op.local_apply(lift))
    x = S.solve(key, op, M, rhs * op.mask, settings, what)
    return x if lift is None else x * op.mask + lift


def _scalar_lift(S: Solvers, op, t):
    lift = None
    for tag, bc in S.scalar_bcs.items():
        if bc.kind != "dirichlet":
            continue
        vals = _eval_value(bc.value, S.mesh.coords, t, 1)
        if lift is None:
            lift = np.zeros(op.shape)
        m = S.tag_mask(tag)
        lift[m] = vals[m]
    return lift


def _velocity_lift(S: Solvers, c, op, t):
    lift = None
    for tag, bc in S.velocity_bcs.items():
        if bc.kind == "dirichlet":
            vals = _eval_value(bc.value, S.mesh.coords, t, 3)[c]
        elif bc.kind == "symmetry" and S.normal_component(tag) == c:
            vals = np.zeros(op.shape)
        else:
            continue
        if lift is None:
            lift = np.zeros(op.shape)
        m = S.tag_mask(tag)
        lift[m] = vals[m]
    return lift


def _source(q, X, t):
    return _eval_value(q, X, t, 1) if q is not None else 0.0


def _coeffs(order, nhist, dt, dts):
    if math.isinf(dt):
        return 0, np.array([0.0]), np.zeros(0)
    k = max(1, min(order, nhist + 1))
    bdf, ext = bdf_ext_coeffs(k, [dt] + list(dts))
    return k, bdf, ext


# ---------------------------------------------------------------------------
# advance


def advance_scalar(state: FlowState, dt, props: MaterialProps | None, S: Solvers, with_advection=True):
    """One BDF/EXT step of ``rho_cp (dT/dt + u.grad T) = div(k grad T) + q``.

    ``dt = inf`` solves the steady conduction problem instead.
    """
    if props is not None and props is not S.props:
        raise ConfigurationError("solver bundle was built for different material properties")
    mesh = S.mesh
    gs = mesh.gs
    mass = mesh.geom.mass
    steady = math.isinf(dt)
    t_new = state.t if steady else state.t + dt
    k, bdf, ext = _coeffs(S.order, len(state.T_prev), dt, state.dts)
    hist = [state.T] + state.T_prev
    advect = with_advection and state.u is not None and not steady
    qhist = []
    if advect:
        with S.timers("makeq"):
            qhist = [makeq(state, S.dealias, S.rc)] + state.Q_hist
    with S.timers("scalarSolve"):
        with S.timers("rhs"):
            local = mass * _source(state.q, mesh.coords, t_new)
            for j in range(1, k + 1):
                local = local - bdf[j] * S.rc * mass * hist[j - 1]
            for j in range(min(k, len(qhist))):
                local = local + ext[j] * qhist[j]
            rhs = gs.apply(np.broadcast_to(local, hist[0].shape))
            for tag, bc in S.scalar_bcs.items():
                if bc.kind == "neumann":
                    area, _ = mesh.faces(tag)
                    rhs = rhs + gs.apply(area * _eval_value(bc.value, mesh.coords, t_new, 1))
        b0 = float(bdf[0])
        op, M = S.scalar_op(b0)
        lift = _scalar_lift(S, op, t_new)
        T = _lifted_solve(S, ("T", b0), op, M, rhs, lift, S.scalar, "scalar")
    if not steady:
        state.T_prev = ([state.T] + state.T_prev)[: S.order - 1]
        state.Q_hist = qhist[: S.order]
    state.T = T
    return state


def kinetic_energy(S: Solvers, u):
    return 0.5 * sum(S.mesh.gs.dot(u[c], S.bmass * u[c]) for c in range(3))


def divergence_norm(S: Solvers, u):
    """Assembled ``|| (q, div u) ||`` relative to ``|| (q, |grad u|) ||``."""
    g = [S.grad(u[c]) for c in range(3)]
    div = g[0][0] + g[1][1] + g[2][2]
    mag = np.sqrt(sum(g[c][a] ** 2 for c in range(3) for a in range(3)))
    mass = S.mesh.geom.mass
    num = S.mesh.gs.apply(mass * div)
    den = S.mesh.gs.apply(mass * mag)
    return math.sqrt(S.mesh.gs.dot(num, num) / max(S.mesh.gs.dot(den, den), 1e-300))


def advance_flow(state: FlowState, dt, S: Solvers):
    """One PN-PN splitting step of the incompressible Navier-Stokes equations."""
    mesh = S.mesh
    gs = mesh.gs
    mass = mesh.geom.mass
    nu = S.props.nu
    t_new = state.t + dt
    k, bdf, ext = _coeffs(S.order, len(state.u_prev), dt, state.dts)
    uhist = [state.u] + state.u_prev
    with S.timers("makef"):
        F = makef(state, S.dealias)
        if state.forcing is not None:
            F = F + mass * _eval_value(state.forcing, mesh.coords, state.t, 3)
        fhist = [F] + state.F_hist
        Fext = sum(ext[j] * fhist[j] for j in range(k))
        Snod = gs.apply(Fext) / S.bmass
        for j in range(1, k + 1):
            Snod = Snod - bdf[j] * uhist[j - 1]
    b0 = float(bdf[0])
    with S.timers("pressureSolve"):
        with S.timers("rhs"):
            uext = sum(ext[j] * uhist[j] for j in range(k))
            R = Snod - nu * S.curl(S.curl(uext))
            drdx = mesh.geom.drdx
            w = [mass * sum(drdx[:, i, a] * R[a] for a in range(3)) for i in range(3)]
            rhs = gs.apply(local_grad_t(w[0], w[1], w[2], S.D))
            for tag, bc in S.velocity_bcs.items():
                if bc.kind != "dirichlet":
                    continue
                _, nA = mesh.faces(tag)
                ub = _eval_value(bc.value, mesh.coords, t_new, 3)
                rhs = rhs - b0 * gs.apply(np.einsum("eckji,cekji->ekji", nA, ub))
        pop, PM = S.pressure_op()
        p = S.solve(("p",), pop, PM, rhs, S.pressure, "pressure")
        p = pop.remove_mean(p)
    with S.timers("velocitySolve"):
        with S.timers("rhs"):
            gp = S.grad(p)
            rhs_u = [gs.apply(mass * (Snod[c] - gp[c])) for c in range(3)]
        u = np.empty_like(state.u)
        for c in range(3):
            op, M = S.velocity_op(c, b0)
            lift = _velocity_lift(S, c, op, t_new)
            u[c] = _lifted_solve(S, ("u", c, b0), op, M, rhs_u[c], lift, S.velocity, f"velocity[{c}]")
    state.u_prev = ([state.u] + state.u_prev)[: S.order - 1]
    state.F_hist = fhist[: S.order]
    state.u = u
    state.p = p
    return state


def finish_step(state: FlowState, dt):
    """Advance the clock after all fields of a step are done."""
    if not math.isinf(dt):
        state.t += dt
        state.dts = ([dt] + state.dts)[:3]
    state.step += 1
    return state
