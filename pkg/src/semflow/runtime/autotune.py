"""Barrier-bracketed timing of registered kernel variants.

Each variant is first cross-checked against variant 0 on the tuning input;
a variant that disagrees by more than ``1e-12`` (relative to the reference
magnitude) is disqualified.  The survivors are timed after warm-up and the
fastest one is selected in the registry for the rest of the run.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import variants
from ..reference import barycentric_weights
from ..reference import registry as ref_registry

log = logging.getLogger("semflow.autotune")

CROSS_CHECK_TOL = 1e-12


@dataclass
class TuneInput:
    """How to run one operation: ``run(variant_fn)`` returns an array.

    ``dofs``, ``flops`` and ``nbytes`` are per call and feed the report.
    """

    run: Callable
    dofs: int
    flops: float
    nbytes: float
    key: tuple = ()


@dataclass
class TuningEntry:
    op: str
    index: int
    variant: str
    precision: str
    seconds: float
    gdofs: float
    gbs: float
    gflops: float
    error: float
    key: tuple = ()
    disqualified: bool = False
    chosen: bool = False


@dataclass
class TuningReport:
    entries: list = field(default_factory=list)
    chosen: dict = field(default_factory=dict)

    def for_op(self, op):
        return [e for e in self.entries if e.op == op]

    def format(self) -> str:
        lines = ["autotuning report:",
                 f"  {'operation':<18}{'variant':<16}{'prec':<6}{'time/call':>12}{'GDOFS':>10}"
                 f"{'GB/s':>10}{'GFLOPS':>10}  status"]
        for e in self.entries:
            status = "DISQUALIFIED" if e.disqualified else ("selected" if e.chosen else "")
            lines.append(f"  {e.op:<18}{e.variant:<16}{e.precision:<6}{e.seconds:12.5e}{e.gdofs:10.4f}"
                         f"{e.gbs:10.3f}{e.gflops:10.3f}  {status}")
        return "\n".join(lines) + "\n"


def _timed(comm, fn, reps):
    times = []
    for _ in range(reps):
        if comm is not None:
            comm.barrier()
        t0 = time.perf_counter()
        fn()
        if comm is not None:
            comm.barrier()
        times.append(time.perf_counter() - t0)
    return times


def autotune(registry: variants.KernelVariantRegistry, inputs: dict, comm=None, warmup=5, reps=20,
             tie_tol=0.05, ops=None) -> TuningReport:
    """Time every variant of each operation in ``inputs`` and select the fastest.

    Collective over ``comm``: every rank measures, the per-repetition
    maximum over ranks is used and the median of those decides.  Variants
    within ``tie_tol`` of the fastest count as ties and the lowest index
    wins, so identical variants always resolve the same way.
    """
    report = TuningReport()
    for op, inp in inputs.items():
        if ops is not None and op not in ops:
            continue
        cands = registry.variants(op)
        ref = np.asarray(inp.run(cands[0].fn))
        scale = max(float(np.max(np.abs(ref))) if ref.size else 0.0, 1e-300)
        rows = []
        for i, v in enumerate(cands):
            out = np.asarray(inp.run(v.fn)) if i else ref
            err = float(np.max(np.abs(out - ref))) / scale if ref.size else 0.0
            if comm is not None:
                err = comm.allreduce(err, "max")
            bad = not err <= CROSS_CHECK_TOL
            if bad:
                log.warning("autotune: %s variant %d (%s) disagrees with variant 0 by %.3e; disqualified",
                            op, i, v.name, err)
                rows.append(TuningEntry(op, i, v.name, v.precision, float("inf"), 0.0, 0.0, 0.0, err,
                                        inp.key, disqualified=True))
                continue
            fn = (lambda f=v.fn: inp.run(f))
            _timed(comm, fn, warmup)
            t = np.array(_timed(comm, fn, reps))
            if comm is not None:
                t = comm.allreduce(t, "max")
            med = float(np.median(t))
            fl = inp.flops * (0.5 if v.precision == "FP32" else 1.0)
            rows.append(TuningEntry(op, i, v.name, v.precision, med, inp.dofs / med / 1e9,
                                    inp.nbytes / med / 1e9, fl / med / 1e9, err, inp.key))
        ok = [r for r in rows if not r.disqualified]
        if not ok:
            log.warning("autotune: every variant of %s failed the cross-check; keeping variant 0", op)
            best = 0
        else:
            fastest = min(r.seconds for r in ok)
            best = min(r.index for r in ok if r.seconds <= fastest * (1 + tie_tol))
            rows[best].chosen = True
        registry.select(op, best)
        report.chosen[op] = best
        report.entries.extend(rows)
    return report


def representative_inputs(mesh, seed=0) -> dict:
    """Tuning inputs for the built-in operations on ``mesh`` (a partition with gs set up)."""
    rng = np.random.default_rng(seed + mesh.rank)
    N = mesh.order
    n = N + 1
    E = mesh.E
    D = ref_registry.deriv(N).entries
    g = mesh.geom.g
    u = rng.standard_normal((E, n, n, n))
    h1 = np.ones_like(u)
    dofs = E * n**3
    out = {
        "local_grad": TuneInput(lambda f: np.stack(f(u, D)), dofs, 6.0 * E * n**4, 8.0 * 4 * E * n**3, (N, E)),
        "laplacian_apply": TuneInput(lambda f: f(u, g, D, h1), dofs, E * (12.0 * n**4 + 15 * n**3),
                                     8.0 * 9 * E * n**3, (N, E)),
    }
    # every rank must tune the same operations, so empty partitions tune on zero points
    npts = 256 if E else 0
    elem = rng.integers(0, max(E, 1), npts)
    rst = rng.uniform(-1, 1, (npts, 3))
    z = ref_registry.rule(N).nodes
    lam = barycentric_weights(z)
    fields = u[None]
    out["findpts_eval"] = TuneInput(lambda f: f(fields, elem, rst, z, lam), npts,
                                    npts * (2.0 * n**3 + 2 * n**2 + 2 * n), 8.0 * npts * n**3, (N, npts))
    gs = mesh.gs
    if gs is not None:
        nshared = int(gs.shared_pos.size)
        out["gs_exchange"] = TuneInput(lambda s: gs.apply(u, strategy=s), dofs, float(u.size),
                                       16.0 * nshared, (N, E))
    return out
