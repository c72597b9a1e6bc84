"""In-process message passing: P ranks as threads, MPI-like communicators,
fixed-order collectives and the crystal router.

Every collective must be called by all ranks of a communicator in the same
order, exactly as with MPI.
"""

from __future__ import annotations

import io
import logging
import math
import threading
import traceback
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

log = logging.getLogger(__name__)

RECV_TIMEOUT = 300.0


class CommError(RuntimeError):
    pass


class RoutingError(CommError):
    pass


class CollectiveError(CommError):
    pass


class HarnessError(RuntimeError):
    def __init__(self, rank, exc, tb=""):
        super().__init__(f"rank {rank} failed: {exc!r}\n{tb}")
        self.rank = rank
        self.exc = exc


class _Aborted(Exception):
    pass


class _World:
    def __init__(self, size, scheduler):
        self.size = size
        self.scheduler = scheduler
        self.cond = threading.Condition()
        self.boxes: dict[tuple, deque] = defaultdict(deque)
        self.aborted = False
        # serial scheduler: one rank runs at a time, the baton passes on blocking waits
        self.baton = threading.Lock() if scheduler == "serial" else None

    def post(self, key, obj):
        with self.cond:
            self.boxes[key].append(obj)
            self.cond.notify_all()

    def take(self, key):
        if self.baton is not None:
            self.baton.release()
        try:
            with self.cond:
                ok = self.cond.wait_for(lambda: self.aborted or bool(self.boxes.get(key)), RECV_TIMEOUT)
                if self.aborted:
                    raise _Aborted()
                if not ok:
                    raise CommError(f"receive timed out waiting on {key}")
                box = self.boxes[key]
                obj = box.popleft()
                if not box:
                    del self.boxes[key]
                return obj
        finally:
            if self.baton is not None:
                self.baton.acquire()

    def abort(self):
        with self.cond:
            self.aborted = True
            self.cond.notify_all()


_REDUCERS = {
    "sum": lambda a, b: a + b,
    "min": np.minimum,
    "max": np.maximum,
}


class Communicator:
    """A group of ranks with its own message context.

    ``members`` maps communicator rank -> world rank.
    """

    def __init__(self, world: _World, members: list[int], rank: int, context: str, group: int = 0, seed=0):
        self._world = world
        self.members = list(members)
        self.rank = rank
        self.size = len(members)
        self.context = context
        self.group = group
        self.seed = seed
        self._seq = 0
        self._nsplit = 0
        self.rng = np.random.default_rng([seed, members[rank]])

    @property
    def world_rank(self) -> int:
        return self.members[self.rank]

    # -- point to point -----------------------------------------------------
    def send(self, dest: int, obj: Any, tag=0):
        if not 0 <= dest < self.size:
            raise CommError(f"destination {dest} outside communicator of size {self.size}")
        self._world.post((self.context, self.rank, dest, tag), obj)

    def recv(self, source: int, tag=0):
        return self._world.take((self.context, source, self.rank, tag))

    def sendrecv(self, obj, partner: int, tag=0):
        self.send(partner, obj, tag)
        return self.recv(partner, tag)

    # -- collectives --------------------------------------------------------
    def _next_tag(self, name):
        self._seq += 1
        return ("coll", name, self._seq)

    def gather(self, obj, root=0):
        tag = self._next_tag("gather")
        if self.rank == root:
            out = [None] * self.size
            out[root] = obj
            for src in range(self.size):
                if src != root:
                    out[src] = self.recv(src, tag)
            return out
        self.send(root, obj, tag)
        return None

    def bcast(self, obj, root=0):
        tag = self._next_tag("bcast")
        if self.rank == root:
            for dst in range(self.size):
                if dst != root:
                    self.send(dst, obj, tag)
            return obj
        return self.recv(root, tag)

    def allgather(self, obj) -> list:
        return self.bcast(self.gather(obj))

    def barrier(self):
        self.allgather(None)

    def allreduce(self, value, op: str = "sum"):
        """Reduce in rank-ascending order at rank 0 and broadcast the result."""
        if op not in _REDUCERS:
            raise CollectiveError(f"unknown reduction {op!r}")
        scalar = np.ndim(value) == 0
        arr = np.asarray(value)
        parts = self.gather(arr)
        if self.rank == 0:
            shapes = {p.shape for p in parts}
            if len(shapes) != 1:
                result = CollectiveError(f"allreduce length mismatch: {sorted(shapes)}")
            else:
                fn = _REDUCERS[op]
                acc = parts[0].copy()
                for p in parts[1:]:
                    acc = fn(acc, p)
                result = acc
        else:
            result = None
        result = self.bcast(result)
        if isinstance(result, Exception):
            raise result
        if scalar:
            return result.item() if isinstance(value, (int, float, np.generic)) else result[()]
        return result

    def split(self, color: int, key: int | None = None) -> "Communicator":
        """Partition ranks by ``color``; order within a color by ``(key, rank)``."""
        key = self.rank if key is None else key
        info = self.allgather((color, key, self.rank))
        self._nsplit += 1
        mine = sorted((k, r) for c, k, r in info if c == color)
        local = [r for _, r in mine]
        members = [self.members[r] for r in local]
        ctx = f"{self.context}/s{self._nsplit}c{color}"
        return Communicator(self._world, members, local.index(self.rank), ctx, group=color, seed=self.seed)


# ---------------------------------------------------------------------------
# harness


def spawn(P: int, program: Callable, *args, seed: int = 0, scheduler: str = "concurrent", **kwargs) -> list:
    """Run ``program(comm, *args, **kwargs)`` on ``P`` ranks; return per-rank results.

    Raises :class:`HarnessError` naming the first failing rank; the other
    ranks are aborted.
    """
    if P < 1:
        raise ValueError("need at least one rank")
    if scheduler not in ("concurrent", "serial"):
        raise ValueError(f"unknown scheduler {scheduler!r}")
    world = _World(P, scheduler)
    results = [None] * P
    failures: list[tuple[int, BaseException, str]] = []
    lock = threading.Lock()

    def entry(rank):
        comm = Communicator(world, list(range(P)), rank, "world", seed=seed)
        if world.baton is not None:
            world.baton.acquire()
        try:
            results[rank] = program(comm, *args, **kwargs)
        except _Aborted:
            pass
        except BaseException as exc:  # noqa: BLE001 - reported to the caller
            with lock:
                failures.append((rank, exc, traceback.format_exc()))
            world.abort()
        finally:
            if world.baton is not None:
                world.baton.release()

    if P == 1:
        entry(0)
    else:
        threads = [threading.Thread(target=entry, args=(r,), name=f"rank{r}", daemon=True) for r in range(P)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    if failures:
        rank, exc, tb = min(failures, key=lambda f: f[0])
        raise HarnessError(rank, exc, tb) from exc
    return results


# ---------------------------------------------------------------------------
# crystal router


@dataclass
class RoutedMessage:
    dest: int
    source: int
    payload: bytes
    tag: int = 0


@dataclass
class RouterStats:
    rounds: int = 0
    bytes_forwarded: int = 0
    max_inbox: int = 0
    fold_steps: int = 0
    history: list = field(default_factory=list)


def _nbytes(msgs):
    return sum(len(m.payload) for m in msgs)


def crystal_route(comm: Communicator, outbox: list[RoutedMessage]) -> tuple[list[RoutedMessage], RouterStats]:
    """Deliver arbitrarily addressed messages by recursive bisection.

    With ``Q`` the largest power of two not above ``P``, ranks ``>= Q`` first
    fold their messages onto rank ``r - Q``; the ``Q`` low ranks then run
    ``log2 Q`` exchange rounds with partner ``rank XOR 2^m`` (highest bit
    first), and finally messages for the folded ranks are handed back.
    The inbox is sorted by ``(source, tag)``.
    """
    P, me = comm.size, comm.rank
    wrong = [m.dest for m in outbox if not 0 <= m.dest < P]
    if comm.allreduce(len(wrong), "max"):
        raise RoutingError(
            f"out-of-range destination posted (rank {me} has {wrong[:5]}), communicator size {P}"
        )
    stats = RouterStats()
    held = [RoutedMessage(m.dest, me if m.source is None else m.source, bytes(m.payload), m.tag) for m in outbox]
    Q = 1 << (P.bit_length() - 1)
    tag = ("crystal", comm._next_tag("crystal"))

    def vrank(d):
        return d - Q if d >= Q else d

    if me >= Q:
        comm.send(me - Q, held, (tag, "fold"))
        stats.bytes_forwarded += _nbytes(held)
        stats.fold_steps += 1
        held = comm.recv(me - Q, (tag, "unfold"))
    else:
        if me + Q < P:
            held = held + comm.recv(me + Q, (tag, "fold"))
            stats.fold_steps += 1
        stats.max_inbox = len(held)
        bit = Q >> 1
        while bit:
            partner = me ^ bit
            keep, send = [], []
            for m in held:
                (send if (vrank(m.dest) & bit) != (me & bit) else keep).append(m)
            got = comm.sendrecv(send, partner, (tag, bit))
            stats.bytes_forwarded += _nbytes(send)
            held = keep + got
            stats.rounds += 1
            stats.max_inbox = max(stats.max_inbox, len(held))
            stats.history.append(len(held))
            bit >>= 1
        if me + Q < P:
            away = [m for m in held if m.dest == me + Q]
            held = [m for m in held if m.dest != me + Q]
            comm.send(me + Q, away, (tag, "unfold"))
            stats.bytes_forwarded += _nbytes(away)
    held.sort(key=lambda m: (m.source, m.tag))
    stats.max_inbox = max(stats.max_inbox, len(held))
    return held, stats


def pack_arrays(*arrays: np.ndarray) -> bytes:
    """Serialize arrays into one payload as a sequence of ``.npy`` records."""
    buf = io.BytesIO()
    for a in arrays:
        np.save(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def unpack_arrays(payload: bytes) -> list[np.ndarray]:
    buf = io.BytesIO(payload)
    out = []
    while buf.tell() < len(payload):
        out.append(np.load(buf, allow_pickle=False))
    return out


def ceil_log2(P: int) -> int:
    return 0 if P <= 1 else math.ceil(math.log2(P))
