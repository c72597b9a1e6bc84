"""Chebyshev polynomial smoother on the Jacobi-scaled operator."""

from __future__ import annotations

import numpy as np


class ConfigurationError(ValueError):
    pass


def estimate_lambda_max(op, steps=20, seed=0):
    """Power iteration on ``D^{-1} A``; returns the Rayleigh-quotient estimate."""
    dinv = (1.0 / op.diag()).astype(op.dtype)
    rng = np.random.default_rng([seed, op.gs.comm.rank])
    x = rng.standard_normal(op.shape).astype(op.dtype)
    x = op.gs.apply(x * op.inv_mult) * op.mask
    lam = 0.0
    for _ in range(steps):
        nrm = np.sqrt(op.dot(x, x))
        if nrm == 0.0:
            break
        x = x / nrm
        y = dinv * op.apply(x)
        lam = op.dot(x, y)
        x = y
    return float(lam)


class ChebyshevSmoother:
    def __init__(self, op, order=6, lmin_frac=0.1, lmax_factor=1.1, lam_max=None):
        if order < 1:
            raise ConfigurationError(f"Chebyshev order must be >= 1, got {order}")
        self.op = op
        self.order = order
        est = estimate_lambda_max(op) if lam_max is None else lam_max
        if not est > 0.0:
            raise ConfigurationError("lambda_max estimate must be positive")
        self.lam_max_estimate = est
        self.hi = lmax_factor * est
        self.lo = lmin_frac * self.hi
        self.dinv = (1.0 / op.diag()).astype(op.dtype) * op.mask

    @property
    def jacobi_weight(self):
        """Damping of the degree-1 smoother, ``2 / (lo + hi)``."""
        return 2.0 / (self.lo + self.hi)

    def smooth(self, x, rhs):
        op = self.op
        theta = 0.5 * (self.hi + self.lo)
        delta = 0.5 * (self.hi - self.lo)
        sigma = theta / delta
        rho = 1.0 / sigma
        r = rhs - op.apply(x) if x is not None else rhs.copy()
        x = np.zeros_like(rhs) if x is None else x.copy()
        d = self.dinv * r / theta
        for k in range(self.order):
            x += d
            if k == self.order - 1:
                break
            r -= op.apply(d)
            rho_new = 1.0 / (2.0 * sigma - rho)
            d = (rho_new * rho) * d + (2.0 * rho_new / delta) * (self.dinv * r)
            rho = rho_new
        return x

    def damping(self, lam):
        """Error amplification at eigenvalue ``lam`` of ``D^{-1}A``."""
        theta = 0.5 * (self.hi + self.lo)
        delta = 0.5 * (self.hi - self.lo)

        def T(k, x):
            x = np.asarray(x, dtype=float)
            return np.where(np.abs(x) <= 1, np.cos(k * np.arccos(np.clip(x, -1, 1))),
                            np.cosh(k * np.arccosh(np.maximum(np.abs(x), 1))) * np.sign(x) ** k)

        return T(self.order, (theta - lam) / delta) / T(self.order, theta / delta)


def chebyshev_smooth(smoother: ChebyshevSmoother, x, rhs):
    return smoother.smooth(x, rhs)
