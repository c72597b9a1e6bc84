"""Hierarchical wall-clock timers and the runtime statistics block."""

from __future__ import annotations

import sys
import time
from contextlib import contextmanager


class TimerNode:
    __slots__ = ("name", "elapsed", "count", "children", "tmin", "tmax")

    def __init__(self, name):
        self.name = name
        self.elapsed = 0.0
        self.count = 0
        self.children: dict[str, TimerNode] = {}
        self.tmin = float("inf")
        self.tmax = 0.0

    def child(self, name) -> "TimerNode":
        node = self.children.get(name)
        if node is None:
            node = self.children[name] = TimerNode(name)
        return node

    def add(self, dt, count=1):
        self.elapsed += dt
        self.count += count
        self.tmin = min(self.tmin, dt)
        self.tmax = max(self.tmax, dt)

    def walk(self, depth=0):
        yield depth, self
        for c in self.children.values():
            yield from c.walk(depth + 1)


class TimerTree:
    """Stack-nested timers rooted at ``solve``.

    ``with timers("pressureSolve"):`` opens a child of whatever section is
    currently open, so nesting follows the call structure.
    """

    # canonical ordering of the top-level rows
    ORDER = ("udfExecuteStep", "makef", "makeq", "udfProperties", "neknek",
             "velocitySolve", "pressureSolve", "scalarSolve")

    def __init__(self, clock=time.perf_counter):
        self.clock = clock
        self.root = TimerNode("solve")
        self._stack = [self.root]
        self.flops = 0.0
        self.started = clock()

    @contextmanager
    def __call__(self, name):
        node = self._stack[-1].child(name)
        self._stack.append(node)
        t0 = self.clock()
        try:
            yield node
        finally:
            node.add(self.clock() - t0)
            self._stack.pop()

    @contextmanager
    def step(self):
        """Time one step into the ``solve`` root."""
        if len(self._stack) != 1:
            raise RuntimeError("step() must not be nested inside another timer")
        t0 = self.clock()
        try:
            yield self.root
        finally:
            self.root.add(self.clock() - t0)

    def record(self, path, seconds, count=1):
        """Add a measurement directly (used for synthetic trees and merges)."""
        node = self.root
        for part in path.split("/"):
            node = node.child(part)
        node.add(seconds, count)
        return node

    def get(self, path):
        node = self.root
        for part in path.split("/"):
            node = node.children[part]
        return node

    def reset(self):
        self.root = TimerNode("solve")
        self._stack = [self.root]
        self.flops = 0.0


def _order_children(node, depth):
    kids = list(node.children.values())
    if depth == 0:
        rank = {n: i for i, n in enumerate(TimerTree.ORDER)}
        kids.sort(key=lambda c: rank.get(c.name, len(rank)))
    return kids


def _reduce_tree(tree: TimerTree, comm):
    """Rank-averaged elapsed per node; min/max per-step solve time.

    Ranks may hold different trees (overset sessions), so rows are merged
    by path over the union of all ranks' nodes, a missing node counting as
    zero.  Averaging (unlike a per-node max) keeps child sums below the
    parent.
    """
    def rows_of(root):
        out = []

        def visit(node, depth, path):
            out.append((depth, path, node))
            for c in _order_children(node, depth):
                visit(c, depth + 1, path + (c.name,))

        visit(root, 0, ())
        return out

    rows = rows_of(tree.root)
    if comm is None:
        return rows, tree.root.tmin, tree.root.tmax, tree.flops
    mine = [(p, n.elapsed, n.count) for _, p, n in rows]
    merged = TimerNode("solve")
    for theirs in comm.allgather(mine):
        for path, el, cnt in theirs:
            node = merged
            for part in path:
                node = node.child(part)
            node.elapsed += el / comm.size
            node.count = max(node.count, cnt)
    tmin = comm.allreduce(tree.root.tmin, "min")
    tmax = comm.allreduce(tree.root.tmax, "max")
    flops = comm.allreduce(float(tree.flops), "sum") / comm.size
    return rows_of(merged), tmin, tmax, flops


def format_stats(tree: TimerTree, step, total_elapsed=None, comm=None) -> str:
    total = tree.clock() - tree.started if total_elapsed is None else total_elapsed
    lines = [f"runtime statistics (step= {step}  totalElapsed= {total:g}s):", "",
             "name                    time          abs"]
    rows, tmin, tmax, flops = _reduce_tree(tree, comm)
    solve = rows[0][2]
    if solve.count == 0 and len(rows) == 1:
        return "\n".join(lines) + "\n"
    S = solve.elapsed
    lines.append(f"{'  solve':<24}{S:.5e}s  {100.0:5.1f}")
    if solve.count:
        lines.append(f"{'    min':<24}{tmin:.5e}s")
        lines.append(f"{'    max':<24}{tmax:.5e}s")
    lines.append(f"{'    flops/rank':<24}{flops:.5e}")
    parents = {(): solve}
    for depth, path, node in rows[1:]:
        parents[path] = node
        parent = parents[path[:-1]]
        name = "  " * (depth + 1) + node.name
        absp = 100.0 * node.elapsed / S if S > 0 else 0.0
        if depth >= 2:
            rel = 100.0 * node.elapsed / parent.elapsed if parent.elapsed > 0 else 0.0
            relcol = f"{rel:6.1f}"
        else:
            relcol = " " * 6
        lines.append(f"{name:<24}{node.elapsed:.5e}s{absp:6.1f}{relcol}{node.count:6d}")
    return "\n".join(lines) + "\n"


def emit_stats(tree: TimerTree, step, stream=None, total_elapsed=None, comm=None) -> str:
    text = format_stats(tree, step, total_elapsed, comm)
    if stream is None:
        stream = sys.stdout
    if comm is None or comm.rank == 0:
        stream.write(text)
    return text


def percent_check(text: str, slack=0.5):
    """Parse a stats block; True if every node's children sum to <= 100% (+slack)."""
    rows = []
    for line in text.splitlines()[3:]:
        name = line[:24]
        depth = (len(name) - len(name.lstrip(" "))) // 2
        label = name.strip()
        if label in ("min", "max", "flops/rank") or not line[24:].strip():
            continue
        elapsed = float(line[24:35])
        absp = float(line[36:42]) if len(line) > 36 else 100.0
        rows.append((depth, label, elapsed, absp))
    ok = True
    for i, (d, _, el, _) in enumerate(rows):
        kids = []
        for d2, _, el2, ab2 in rows[i + 1:]:
            if d2 <= d:
                break
            if d2 == d + 1:
                kids.append((el2, ab2))
        if not kids:
            continue
        if d == 1:
            ok &= sum(a for _, a in kids) <= 100.0 + slack
        ok &= sum(e for e, _ in kids) <= el * (1 + 1e-5) + 1e-12
    return bool(ok)
