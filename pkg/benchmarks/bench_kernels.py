"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--N 7] [--E 64] [--reps 20]

Each kernel is run once for JIT warm-up, checked against the numpy result
and then timed; the table reports median seconds per call and the speedup.
"""

import argparse
import time

import numpy as np

from semflow import kernels
from semflow._jit import HAVE_NUMBA
from semflow.mesh import build_global_box, deform_global
from semflow.reference import barycentric_weights, registry


def median_time(fn, reps):
    fn()
    ts = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--N", type=int, default=7)
    ap.add_argument("--E", type=int, default=64)
    ap.add_argument("--reps", type=int, default=20)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    N, n = args.N, args.N + 1
    k = max(1, round(args.E ** (1 / 3)))
    gm = build_global_box((k, k, k), N=N)
    gm = deform_global(gm, lambda x, y, z: (x + 0.05 * np.sin(np.pi * y), y + 0.05 * np.sin(np.pi * z), z))
    mesh = gm.partition(1)[0]
    E = mesh.E
    rng = np.random.default_rng(0)
    u = rng.standard_normal((E, n, n, n))
    D = registry.deriv(N).entries
    g = mesh.geom.g
    h1 = np.ones_like(u)
    z = registry.rule(N).nodes
    lam = barycentric_weights(z)
    npts = 2000
    elem = rng.integers(0, E, npts)
    rst = rng.uniform(-1, 1, (npts, 3))
    # physical targets for the Newton kernel: images of random reference points
    xs = kernels.eval_points_numpy(np.moveaxis(mesh.coords, 1, 0), elem, rst, z, lam).T.copy()
    r0 = np.zeros((npts, 3))

    cases = [
        ("local_grad", lambda: np.stack(kernels.grad_numpy(u, D)), lambda: np.stack(kernels.grad_numba(u, D))),
        ("laplacian_apply", lambda: kernels.ax_numpy(u, g, D, h1), lambda: kernels.ax_numba(u, g, D, h1)),
        ("findpts_eval", lambda: kernels.eval_points_numpy(u[None], elem, rst, z, lam),
         lambda: kernels.eval_points_numba(u[None], elem, rst, z, lam)),
        ("newton", lambda: kernels.newton_numpy(mesh.coords, elem, xs, r0, z, lam)[0],
         lambda: kernels.newton_numba(mesh.coords, elem, xs, r0, z, lam)[0]),
    ]
    print(f"E={E} N={N} points={npts} reps={args.reps}")
    print(f"{'kernel':<18}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>9}{'max diff':>11}")
    for name, f_np, f_nb in cases:
        diff = float(np.max(np.abs(f_np() - f_nb())))
        t_np = median_time(f_np, args.reps)
        t_nb = median_time(f_nb, args.reps)
        print(f"{name:<18}{t_np:12.3e}{t_nb:12.3e}{t_np / t_nb:9.2f}{diff:11.2e}")


if __name__ == "__main__":
    main()
