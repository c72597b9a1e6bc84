"""Registry of interchangeable kernel implementations.

Operators look up the currently selected variant by name; the autotuner
(or ``--force-variant``) changes the selection for the rest of the run.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable

from . import kernels
from ._jit import HAVE_NUMBA, USE_NUMBA


@dataclass
class Variant:
    name: str
    fn: Callable
    precision: str = "FP64"


@dataclass
class KernelVariantRegistry:
    ops: dict = field(default_factory=dict)
    selected: dict = field(default_factory=dict)

    def __post_init__(self):
        self._lock = threading.Lock()

    def register(self, op: str, name: str, fn: Callable, precision="FP64") -> int:
        with self._lock:
            lst = self.ops.setdefault(op, [])
            lst.append(Variant(name, fn, precision))
            self.selected.setdefault(op, 0)
            return len(lst) - 1

    def variants(self, op: str) -> list[Variant]:
        return self.ops[op]

    def select(self, op: str, idx: int):
        if op not in self.ops or not 0 <= idx < len(self.ops[op]):
            raise KeyError(f"no variant {idx} for operation {op!r}")
        with self._lock:
            self.selected[op] = idx

    def current(self, op: str) -> Callable:
        return self.ops[op][self.selected[op]].fn

    def current_name(self, op: str) -> str:
        return self.ops[op][self.selected[op]].name


def default_registry() -> KernelVariantRegistry:
    reg = KernelVariantRegistry()
    reg.register("local_grad", "numpy-matmul", kernels.grad_numpy)
    reg.register("laplacian_apply", "numpy-matmul", kernels.ax_numpy)
    reg.register("findpts_eval", "numpy-gemm", kernels.eval_points_numpy)
    if HAVE_NUMBA:
        reg.register("local_grad", "numba-loop", kernels.grad_numba)
        reg.register("laplacian_apply", "numba-fused", kernels.ax_numba)
        reg.register("findpts_eval", "numba-loop", kernels.eval_points_numba)
        if USE_NUMBA:
            for op in ("local_grad", "laplacian_apply", "findpts_eval"):
                reg.selected[op] = 1
    reg.register("gs_exchange", "per-message", "per-message")
    reg.register("gs_exchange", "pre-pack", "pre-pack")
    return reg


registry = default_registry()
