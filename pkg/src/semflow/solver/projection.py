"""Initial guesses from an A-orthonormal basis of prior solutions."""

from __future__ import annotations

import warnings

import numpy as np


class ProjectionSpace:
    def __init__(self, op, max_dim=8):
        self.op = op
        self.max_dim = int(max_dim)
        self.X: list[np.ndarray] = []
        self.AX: list[np.ndarray] = []
        self.resets = 0

    def __len__(self):
        return len(self.X)

    def reset(self):
        self.X.clear()
        self.AX.clear()

    def guess(self, rhs):
        """A-orthogonal projection of ``A^{-1} rhs`` onto the stored span."""
        x = np.zeros_like(rhs)
        for xi in self.X:
            x += self.op.dot(xi, rhs) * xi
        return x

    def update(self, sol):
        """Add ``sol`` to the basis: two Gram-Schmidt passes, usually one matvec."""
        if self.max_dim <= 0:
            return
        if len(self.X) >= self.max_dim:
            # full: restart from the newest solution.  Dropping the oldest vector
            # instead would also drop that vector's share of ``sol``.
            self.reset()
        op = self.op
        w = np.array(sol, dtype=np.float64)
        Aw = op.apply(w)
        ref = op.dot(w, Aw)
        for _ in range(2):
            for xi, Axi in zip(self.X, self.AX):
                c = op.dot(xi, Aw)
                w -= c * xi
                Aw -= c * Axi
            if self.X and op.dot(w, Aw) < 1e-4 * ref:
                # heavy cancellation: the running A-product has lost its digits
                Aw = op.apply(w)
        nrm2 = op.dot(w, Aw)
        if not np.isfinite(nrm2):
            warnings.warn("projection basis contains non-finite values; resetting", RuntimeWarning, stacklevel=2)
            self.reset()
            self.resets += 1
            return
        if nrm2 <= 1e-20 * max(ref, 1e-300):
            return  # already in the span
        s = 1.0 / np.sqrt(nrm2)
        self.X.append(w * s)
        self.AX.append(Aw * s)

    def gram(self):
        """``X^T A X`` (identity for a healthy basis)."""
        k = len(self.X)
        G = np.empty((k, k))
        for i in range(k):
            for j in range(k):
                G[i, j] = self.op.dot(self.X[i], self.AX[j])
        return G


def project_guess(space: ProjectionSpace, rhs):
    return space.guess(rhs)
