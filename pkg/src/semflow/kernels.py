"""Hot element kernels, each with a numba path and a pure-numpy path.

The numpy path is used when numba is missing or ``SEMFLOW_DISABLE_JIT=1``.
Both paths are exported so the autotuner and the benchmark can time them
side by side.
"""

from __future__ import annotations

import numpy as np

from ._jit import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# local gradient / stiffness action


def grad_numpy(u, D):
    E = u.shape[0]
    n = D.shape[0]
    ur = u @ D.T
    us = np.matmul(D, u)
    ut = np.matmul(D, u.reshape(E, n, n * n)).reshape(u.shape)
    return ur, us, ut


def grad_t_numpy(wr, ws, wt, D):
    E = wr.shape[0]
    n = D.shape[0]
    Dt = D.T
    out = wr @ D
    out += np.matmul(Dt, ws)
    out += np.matmul(Dt, wt.reshape(E, n, n * n)).reshape(wr.shape)
    return out


def ax_numpy(u, g, D, h1):
    """Elementwise stiffness action ``D^T (h1 G) D u`` (no assembly)."""
    ur, us, ut = grad_numpy(u, D)
    wr = g[:, 0] * ur + g[:, 1] * us + g[:, 2] * ut
    ws = g[:, 1] * ur + g[:, 3] * us + g[:, 4] * ut
    wt = g[:, 2] * ur + g[:, 4] * us + g[:, 5] * ut
    if h1 is not None:
        wr *= h1
        ws *= h1
        wt *= h1
    return grad_t_numpy(wr, ws, wt, D)


@njit
def _grad_jit(u, D, ur, us, ut):
    E = u.shape[0]
    n = D.shape[0]
    for e in range(E):
        for k in range(n):
            for j in range(n):
                for i in range(n):
                    a = 0.0
                    b = 0.0
                    c = 0.0
                    for m in range(n):
                        a += D[i, m] * u[e, k, j, m]
                        b += D[j, m] * u[e, k, m, i]
                        c += D[k, m] * u[e, m, j, i]
                    ur[e, k, j, i] = a
                    us[e, k, j, i] = b
                    ut[e, k, j, i] = c


def grad_numba(u, D):
    D = np.ascontiguousarray(D, dtype=u.dtype)
    ur = np.empty_like(u)
    us = np.empty_like(u)
    ut = np.empty_like(u)
    _grad_jit(np.ascontiguousarray(u), D, ur, us, ut)
    return ur, us, ut


@njit
def _ax_jit(u, g, D, h1, use_h1, out):
    E = u.shape[0]
    n = D.shape[0]
    wr = np.empty((n, n, n), dtype=u.dtype)
    ws = np.empty((n, n, n), dtype=u.dtype)
    wt = np.empty((n, n, n), dtype=u.dtype)
    for e in range(E):
        for k in range(n):
            for j in range(n):
                for i in range(n):
                    a = 0.0
                    b = 0.0
                    c = 0.0
                    for m in range(n):
                        a += D[i, m] * u[e, k, j, m]
                        b += D[j, m] * u[e, k, m, i]
                        c += D[k, m] * u[e, m, j, i]
                    s = 1.0
                    if use_h1:
                        s = h1[e, k, j, i]
                    wr[k, j, i] = s * (g[e, 0, k, j, i] * a + g[e, 1, k, j, i] * b + g[e, 2, k, j, i] * c)
                    ws[k, j, i] = s * (g[e, 1, k, j, i] * a + g[e, 3, k, j, i] * b + g[e, 4, k, j, i] * c)
                    wt[k, j, i] = s * (g[e, 2, k, j, i] * a + g[e, 4, k, j, i] * b + g[e, 5, k, j, i] * c)
        for k in range(n):
            for j in range(n):
                for i in range(n):
                    acc = 0.0
                    for m in range(n):
                        acc += D[m, i] * wr[k, j, m] + D[m, j] * ws[k, m, i] + D[m, k] * wt[m, j, i]
                    out[e, k, j, i] = acc


def ax_numba(u, g, D, h1):
    u = np.ascontiguousarray(u)
    D = np.ascontiguousarray(D, dtype=u.dtype)
    out = np.empty_like(u)
    if h1 is None:
        _ax_jit(u, g, D, u, False, out)
    else:
        _ax_jit(u, g, D, np.ascontiguousarray(h1, dtype=u.dtype), True, out)
    return out


grad = grad_numba if USE_NUMBA else grad_numpy
ax = ax_numba if USE_NUMBA else ax_numpy

# ---------------------------------------------------------------------------
# isoparametric map evaluation and Newton inversion


@njit
def _basis_1d(z, lam, x, h, dh):
    n = z.shape[0]
    P = np.ones(n + 1)
    dP = np.zeros(n + 1)
    for a in range(n):
        P[a + 1] = P[a] * (x - z[a])
        dP[a + 1] = dP[a] * (x - z[a]) + P[a]
    S = np.ones(n + 1)
    dS = np.zeros(n + 1)
    for a in range(n - 1, -1, -1):
        S[a] = S[a + 1] * (x - z[a])
        dS[a] = dS[a + 1] * (x - z[a]) + S[a + 1]
    for a in range(n):
        h[a] = P[a] * S[a + 1] * lam[a]
        dh[a] = (dP[a] * S[a + 1] + P[a] * dS[a + 1]) * lam[a]


@njit
def _map_eval(X, z, lam, r, x, J, hr, dhr, hs, dhs, ht, dht):
    n = z.shape[0]
    _basis_1d(z, lam, r[0], hr, dhr)
    _basis_1d(z, lam, r[1], hs, dhs)
    _basis_1d(z, lam, r[2], ht, dht)
    for c in range(3):
        v = 0.0
        vr = 0.0
        vs = 0.0
        vt = 0.0
        for k in range(n):
            a0 = 0.0
            ar = 0.0
            as_ = 0.0
            for j in range(n):
                b0 = 0.0
                br = 0.0
                for i in range(n):
                    xv = X[c, k, j, i]
                    b0 += xv * hr[i]
                    br += xv * dhr[i]
                a0 += b0 * hs[j]
                ar += br * hs[j]
                as_ += b0 * dhs[j]
            v += a0 * ht[k]
            vr += ar * ht[k]
            vs += as_ * ht[k]
            vt += a0 * dht[k]
        x[c] = v
        J[c, 0] = vr
        J[c, 1] = vs
        J[c, 2] = vt


@njit
def _newton_one(X, z, lam, xs, r0, maxit, out_r):
    n = z.shape[0]
    hr = np.empty(n)
    dhr = np.empty(n)
    hs = np.empty(n)
    dhs = np.empty(n)
    ht = np.empty(n)
    dht = np.empty(n)
    r = np.empty(3)
    rn = np.empty(3)
    for d in range(3):
        r[d] = min(1.0, max(-1.0, r0[d]))
    x = np.empty(3)
    J = np.empty((3, 3))
    xn = np.empty(3)
    Jn = np.empty((3, 3))
    res = np.empty(3)
    M = np.empty((3, 3))
    rhs = np.empty(3)
    g = np.empty(3)
    free = np.empty(3, dtype=np.bool_)
    _map_eval(X, z, lam, r, x, J, hr, dhr, hs, dhs, ht, dht)
    f = 0.0
    for c in range(3):
        res[c] = x[c] - xs[c]
        f += res[c] * res[c]
    converged = False
    it = 0
    while it < maxit:
        it += 1
        if f == 0.0:
            converged = True
            break
        for a in range(3):
            g[a] = J[0, a] * res[0] + J[1, a] * res[1] + J[2, a] * res[2]
            free[a] = not ((r[a] <= -1.0 and g[a] > 0.0) or (r[a] >= 1.0 and g[a] < 0.0))
        nfree = 0
        for a in range(3):
            if free[a]:
                nfree += 1
        if nfree == 0:
            converged = True
            break
        for a in range(3):
            for b in range(3):
                if free[a] and free[b]:
                    M[a, b] = J[0, a] * J[0, b] + J[1, a] * J[1, b] + J[2, a] * J[2, b]
                elif a == b:
                    M[a, b] = 1.0
                else:
                    M[a, b] = 0.0
            rhs[a] = -g[a] if free[a] else 0.0
        dr = np.linalg.solve(M, rhs)
        alpha = 1.0
        accepted = False
        fn = f
        for _ls in range(40):
            for a in range(3):
                rn[a] = min(1.0, max(-1.0, r[a] + alpha * dr[a]))
            _map_eval(X, z, lam, rn, xn, Jn, hr, dhr, hs, dhs, ht, dht)
            fn = 0.0
            for c in range(3):
                fn += (xn[c] - xs[c]) ** 2
            if fn <= f:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            converged = True
            break
        step = 0.0
        for a in range(3):
            step += (rn[a] - r[a]) ** 2
            r[a] = rn[a]
            x[a] = xn[a]
            for b in range(3):
                J[a, b] = Jn[a, b]
        f = fn
        for c in range(3):
            res[c] = x[c] - xs[c]
        if np.sqrt(step) <= 1e-13:
            converged = True
            break
    for d in range(3):
        out_r[d] = r[d]
    return np.sqrt(f), converged


@njit
def _newton_batch_jit(coords, elem, xs, r0, z, lam, maxit, rstar, dist, conv):
    for p in range(xs.shape[0]):
        d, c = _newton_one(coords[elem[p]], z, lam, xs[p], r0[p], maxit, rstar[p])
        dist[p] = d
        conv[p] = c


def newton_numba(coords, elem, xs, r0, z, lam, maxit=50):
    m = xs.shape[0]
    rstar = np.empty((m, 3))
    dist = np.empty(m)
    conv = np.empty(m, dtype=np.bool_)
    if m:
        _newton_batch_jit(
            np.ascontiguousarray(coords, dtype=np.float64),
            np.ascontiguousarray(elem, dtype=np.int64),
            np.ascontiguousarray(xs, dtype=np.float64),
            np.ascontiguousarray(r0, dtype=np.float64),
            z, lam, maxit, rstar, dist, conv,
        )
    return rstar, dist, conv


def _basis_np(z, lam, x):
    n = z.size
    m = x.size
    d = x[:, None] - z[None, :]
    P = np.ones((m, n + 1))
    dP = np.zeros((m, n + 1))
    for a in range(n):
        P[:, a + 1] = P[:, a] * d[:, a]
        dP[:, a + 1] = dP[:, a] * d[:, a] + P[:, a]
    S = np.ones((m, n + 1))
    dS = np.zeros((m, n + 1))
    for a in range(n - 1, -1, -1):
        S[:, a] = S[:, a + 1] * d[:, a]
        dS[:, a] = dS[:, a + 1] * d[:, a] + S[:, a + 1]
    return P[:, :n] * S[:, 1:] * lam, (dP[:, :n] * S[:, 1:] + P[:, :n] * dS[:, 1:]) * lam


def map_eval_numpy(X, z, lam, r):
    """Map values ``(m,3)`` and Jacobians ``(m,3,3)`` for per-point element coords ``X``."""
    hr, dhr = _basis_np(z, lam, r[:, 0])
    hs, dhs = _basis_np(z, lam, r[:, 1])
    ht, dht = _basis_np(z, lam, r[:, 2])
    A0 = np.einsum("pckji,pi->pckj", X, hr)
    Ar = np.einsum("pckji,pi->pckj", X, dhr)
    B0 = np.einsum("pckj,pj->pck", A0, hs)
    Br = np.einsum("pckj,pj->pck", Ar, hs)
    Bs = np.einsum("pckj,pj->pck", A0, dhs)
    x = np.einsum("pck,pk->pc", B0, ht)
    J = np.empty((r.shape[0], 3, 3))
    J[:, :, 0] = np.einsum("pck,pk->pc", Br, ht)
    J[:, :, 1] = np.einsum("pck,pk->pc", Bs, ht)
    J[:, :, 2] = np.einsum("pck,pk->pc", B0, dht)
    return x, J


def newton_numpy(coords, elem, xs, r0, z, lam, maxit=50):
    m = xs.shape[0]
    X = coords[elem]
    r = np.clip(np.array(r0, dtype=float), -1.0, 1.0)
    dist = np.zeros(m)
    conv = np.zeros(m, dtype=bool)
    if m == 0:
        return r.reshape(0, 3), dist, conv
    x, J = map_eval_numpy(X, z, lam, r)
    res = x - xs
    f = np.einsum("pc,pc->p", res, res)
    active = np.ones(m, dtype=bool)
    for _ in range(maxit):
        done = active & (f == 0.0)
        conv[done] = True
        active &= ~done
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        Ja, ra, resa = J[idx], r[idx], res[idx]
        g = np.einsum("pca,pc->pa", Ja, resa)
        free = ~(((ra <= -1.0) & (g > 0.0)) | ((ra >= 1.0) & (g < 0.0)))
        none_free = ~free.any(axis=1)
        conv[idx[none_free]] = True
        active[idx[none_free]] = False
        keep = ~none_free
        idx, Ja, ra, g, free = idx[keep], Ja[keep], ra[keep], g[keep], free[keep]
        if idx.size == 0:
            continue
        JtJ = np.einsum("pca,pcb->pab", Ja, Ja)
        F2 = free[:, :, None] & free[:, None, :]
        M = np.where(F2, JtJ, 0.0)
        M[:, [0, 1, 2], [0, 1, 2]] = np.where(free, M[:, [0, 1, 2], [0, 1, 2]], 1.0)
        rhs = np.where(free, -g, 0.0)
        dr = np.linalg.solve(M, rhs[:, :, None])[:, :, 0]
        alpha = np.ones(idx.size)
        pending = np.ones(idx.size, dtype=bool)
        rn = ra.copy()
        xn = x[idx].copy()
        Jn = Ja.copy()
        fn = f[idx].copy()
        for _ls in range(40):
            if not pending.any():
                break
            sel = np.nonzero(pending)[0]
            cand = np.clip(ra[sel] + alpha[sel, None] * dr[sel], -1.0, 1.0)
            xc, Jc = map_eval_numpy(X[idx[sel]], z, lam, cand)
            fc = np.einsum("pc,pc->p", xc - xs[idx[sel]], xc - xs[idx[sel]])
            ok = fc <= f[idx[sel]]
            good = sel[ok]
            rn[good], xn[good], Jn[good], fn[good] = cand[ok], xc[ok], Jc[ok], fc[ok]
            pending[good] = False
            alpha[sel[~ok]] *= 0.5
        failed = idx[pending]
        conv[failed] = True
        active[failed] = False
        acc = ~pending
        ia = idx[acc]
        step = np.sqrt(np.einsum("pa,pa->p", rn[acc] - ra[acc], rn[acc] - ra[acc]))
        r[ia], x[ia], J[ia], f[ia] = rn[acc], xn[acc], Jn[acc], fn[acc]
        res[ia] = x[ia] - xs[ia]
        small = ia[step <= 1e-13]
        conv[small] = True
        active[small] = False
    return r, np.sqrt(f), conv


newton = newton_numba if USE_NUMBA else newton_numpy

# ---------------------------------------------------------------------------
# point evaluation of nodal fields


@njit
def _eval_points_jit(fields, elem, rst, z, lam, out):
    n = z.shape[0]
    hr = np.empty(n)
    hs = np.empty(n)
    ht = np.empty(n)
    dd = np.empty(n)
    for p in range(elem.shape[0]):
        _basis_1d(z, lam, rst[p, 0], hr, dd)
        _basis_1d(z, lam, rst[p, 1], hs, dd)
        _basis_1d(z, lam, rst[p, 2], ht, dd)
        e = elem[p]
        for f in range(fields.shape[0]):
            v = 0.0
            for k in range(n):
                a = 0.0
                for j in range(n):
                    b = 0.0
                    for i in range(n):
                        b += fields[f, e, k, j, i] * hr[i]
                    a += b * hs[j]
                v += a * ht[k]
            out[f, p] = v


def eval_points_numba(fields, elem, rst, z, lam):
    out = np.empty((fields.shape[0], elem.shape[0]))
    if elem.shape[0]:
        _eval_points_jit(
            np.ascontiguousarray(fields, dtype=np.float64),
            np.ascontiguousarray(elem, dtype=np.int64),
            np.ascontiguousarray(rst, dtype=np.float64),
            z, lam, out,
        )
    return out


def eval_points_numpy(fields, elem, rst, z, lam):
    """Batched evaluation: points sharing an element use one basis-matrix product."""
    nf = fields.shape[0]
    n = z.size
    out = np.empty((nf, elem.shape[0]))
    if elem.shape[0] == 0:
        return out
    hr = _basis_np(z, lam, rst[:, 0])[0]
    hs = _basis_np(z, lam, rst[:, 1])[0]
    ht = _basis_np(z, lam, rst[:, 2])[0]
    order = np.argsort(elem, kind="stable")
    es, starts = np.unique(elem[order], return_index=True)
    bounds = np.append(starts, order.size)
    for e, a, b in zip(es, bounds[:-1], bounds[1:]):
        pts = order[a:b]
        # (nf*n*n, n) @ (n, m): one gemm for every point in this element
        T1 = (fields[:, e].reshape(nf * n * n, n) @ hr[pts].T).reshape(nf, n, n, pts.size)
        T2 = np.einsum("fkjp,pj->fkp", T1, hs[pts])
        out[:, pts] = np.einsum("fkp,pk->fp", T2, ht[pts])
    return out


eval_points = eval_points_numba if USE_NUMBA else eval_points_numpy
