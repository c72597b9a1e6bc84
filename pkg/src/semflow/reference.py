"""Gauss-Lobatto-Legendre reference element and tensor-contraction kernels.

Element arrays are stored as ``(..., N+1, N+1, N+1)`` numpy arrays indexed
``[t, s, r]`` so that the flattened index is lexicographic with ``r`` fastest.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

MAX_ORDER = 15


class InvalidOrderError(ValueError):
    pass


class ShapeError(ValueError):
    pass


def legendre(N: int, x):
    """Return ``(L_N(x), L_N'(x))`` by the three-term recurrence."""
    x = np.asarray(x, dtype=float)
    p0 = np.ones_like(x)
    if N == 0:
        return p0, np.zeros_like(x)
    p1 = x.copy()
    d0, d1 = np.zeros_like(x), np.ones_like(x)
    for k in range(2, N + 1):
        p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k
        d2 = d0 + (2 * k - 1) * p1
        p0, p1 = p1, p2
        d0, d1 = d1, d2
    return p1, d1


def _lobatto_poly(N, x):
    """(1 - x^2) L_N'(x) and its derivative, via the Legendre ODE."""
    L, dL = legendre(N, x)
    f = (1.0 - x * x) * dL
    # d/dx[(1-x^2)L'] = -N(N+1) L
    df = -N * (N + 1) * L
    return f, df


def _refine_root(N, x0, lo, hi, tol=1e-15):
    a, b = lo, hi
    fa, _ = _lobatto_poly(N, a)
    x = x0
    for _ in range(100):
        f, df = _lobatto_poly(N, x)
        if f == 0.0:
            return x
        if (f > 0) == (fa > 0):
            a, fa = x, f
        else:
            b = x
        step = f / df if df != 0.0 else np.inf
        xn = x - step
        if not (a < xn < b):
            xn = 0.5 * (a + b)
        if abs(xn - x) <= tol:
            return xn
        x = xn
    return x


@dataclass(frozen=True)
class GllRule:
    order: int
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def n(self) -> int:
        return self.order + 1


def gll_rule(N: int) -> GllRule:
    """GLL nodes (roots of ``(1-x^2) L_N'``) and weights for order ``N``."""
    if not isinstance(N, (int, np.integer)) or N < 1 or N > MAX_ORDER:
        raise InvalidOrderError(f"polynomial order must be in [1, {MAX_ORDER}], got {N!r}")
    N = int(N)
    cheb = -np.cos(np.pi * np.arange(N + 1) / N)
    # sign-change brackets from a fine cosine-clustered scan
    grid = -np.cos(np.linspace(0.0, np.pi, 40 * N + 1))[1:-1]
    f, _ = _lobatto_poly(N, grid)
    flips = np.nonzero(np.sign(f[:-1]) != np.sign(f[1:]))[0]
    if flips.size != N - 1:
        raise InvalidOrderError(f"failed to bracket GLL nodes for N={N}")
    nodes = np.empty(N + 1)
    nodes[0], nodes[N] = -1.0, 1.0
    for i, b in enumerate(flips, start=1):
        lo, hi = grid[b], grid[b + 1]
        x0 = cheb[i] if lo < cheb[i] < hi else 0.5 * (lo + hi)
        nodes[i] = _refine_root(N, x0, lo, hi)
    # enforce exact symmetry
    nodes = 0.5 * (nodes - nodes[::-1])
    LN, _ = legendre(N, nodes)
    weights = 2.0 / (N * (N + 1) * LN**2)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return GllRule(N, nodes, weights)


def barycentric_weights(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    diff = z[:, None] - z[None, :]
    np.fill_diagonal(diff, 1.0)
    return 1.0 / diff.prod(axis=1)


def lagrange_matrix(z: np.ndarray, x) -> np.ndarray:
    """Values ``h_j(x_i)`` of the Lagrange cardinal functions on nodes ``z``."""
    z = np.asarray(z, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    lam = barycentric_weights(z)
    diff = x[:, None] - z[None, :]
    exact = diff == 0.0
    diff[exact] = 1.0
    terms = lam[None, :] / diff
    H = terms / terms.sum(axis=1, keepdims=True)
    rows = exact.any(axis=1)
    H[rows] = exact[rows].astype(float)
    return H


def lagrange_with_derivative(z: np.ndarray, x) -> tuple[np.ndarray, np.ndarray]:
    """Values and first derivatives of the cardinal functions at points ``x``.

    Uses prefix/suffix products so it is well defined at the nodes themselves.
    """
    z = np.asarray(z, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = z.size
    lam = barycentric_weights(z)
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
    h = P[:, :n] * S[:, 1:] * lam
    dh = (dP[:, :n] * S[:, 1:] + P[:, :n] * dS[:, 1:]) * lam
    return h, dh


@dataclass(frozen=True)
class DerivMatrix:
    order: int
    entries: np.ndarray


@dataclass(frozen=True)
class InterpMatrix:
    from_order: int
    to_order: int
    entries: np.ndarray


def deriv_matrix(rule: GllRule) -> DerivMatrix:
    z = rule.nodes
    lam = barycentric_weights(z)
    n = z.size
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                D[i, j] = (lam[j] / lam[i]) / (z[i] - z[j])
        D[i, i] = -D[i].sum()
    D.setflags(write=False)
    return DerivMatrix(rule.order, D)


def interp_matrix(from_rule: GllRule, to_rule: GllRule) -> InterpMatrix:
    J = lagrange_matrix(from_rule.nodes, to_rule.nodes)
    J.setflags(write=False)
    return InterpMatrix(from_rule.order, to_rule.order, J)


class _Registry:
    """Per-order cache of rules and matrices, safe to share between ranks."""

    def __init__(self):
        self._lock = threading.Lock()
        self._rules: dict[int, GllRule] = {}
        self._deriv: dict[int, DerivMatrix] = {}
        self._interp: dict[tuple[int, int], InterpMatrix] = {}

    def rule(self, N):
        with self._lock:
            if N not in self._rules:
                self._rules[N] = gll_rule(N)
            return self._rules[N]

    def deriv(self, N):
        rule = self.rule(N)
        with self._lock:
            if N not in self._deriv:
                self._deriv[N] = deriv_matrix(rule)
            return self._deriv[N]

    def interp(self, N, Nq):
        a, b = self.rule(N), self.rule(Nq)
        with self._lock:
            if (N, Nq) not in self._interp:
                self._interp[(N, Nq)] = interp_matrix(a, b)
            return self._interp[(N, Nq)]


registry = _Registry()


@dataclass
class OpCounter:
    """Multiply-add counter used to check the O(N^4) contraction cost."""

    madds: int = 0
    calls: dict = field(default_factory=dict)

    def add(self, name, count):
        self.madds += int(count)
        self.calls[name] = self.calls.get(name, 0) + 1


_AXES = {"r": -1, "s": -2, "t": -3}


def tensor_apply(A, axis: str, u: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    """Contract matrix ``A`` against one axis of element array(s) ``u``."""
    A = np.asarray(A)
    if axis not in _AXES:
        raise ShapeError(f"axis must be one of r, s, t; got {axis!r}")
    u = np.asarray(u)
    if u.ndim < 3:
        raise ShapeError(f"element array needs 3 trailing axes, got shape {u.shape}")
    ax = _AXES[axis]
    if A.ndim != 2 or A.shape[1] != u.shape[ax]:
        raise ShapeError(f"matrix {A.shape} does not match extent {u.shape[ax]} along {axis}")
    if axis == "r":
        out = u @ A.T
    elif axis == "s":
        out = np.matmul(A, u)
    else:
        lead = u.shape[:-3]
        nt, ns, nr = u.shape[-3:]
        v = u.reshape(lead + (nt, ns * nr))
        out = np.matmul(A, v).reshape(lead + (A.shape[0], ns, nr))
    if counter is not None:
        counter.add("tensor_apply", A.shape[0] * u.size)
    return out


def local_grad(u: np.ndarray, D, counter: OpCounter | None = None):
    """Reference-space gradient ``(u_r, u_s, u_t)`` of element array(s) ``u``."""
    if isinstance(D, DerivMatrix):
        D = D.entries
    return (
        tensor_apply(D, "r", u, counter),
        tensor_apply(D, "s", u, counter),
        tensor_apply(D, "t", u, counter),
    )


def local_grad_t(wr, ws, wt, D) -> np.ndarray:
    """Transpose of :func:`local_grad`: ``D_r^T wr + D_s^T ws + D_t^T wt``."""
    if isinstance(D, DerivMatrix):
        D = D.entries
    Dt = D.T
    return tensor_apply(Dt, "r", wr) + tensor_apply(Dt, "s", ws) + tensor_apply(Dt, "t", wt)


def interp3(J, u: np.ndarray) -> np.ndarray:
    """Apply the 1D matrix ``J`` along all three axes (e.g. GLL(N) -> GLL(Nq))."""
    if isinstance(J, InterpMatrix):
        J = J.entries
    return tensor_apply(J, "t", tensor_apply(J, "s", tensor_apply(J, "r", u)))


def dealias_order(N: int) -> int:
    """Default quadrature order from the 3/2 rule: ``ceil(3(N+1)/2) - 1``,
    capped at the largest supported order."""
    return min(-(-3 * (N + 1) // 2) - 1, MAX_ORDER)
