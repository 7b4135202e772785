"""Per-node dispatch engine.

A dispatcher thread takes delivered or triggered objects, matches their keys
against registered prefixes in a component-wise trie, and pushes one
``UpcallEvent`` per match onto a worker's queue. Events hold references to
the object; nothing is copied per match.
"""

from __future__ import annotations

import enum
import logging
import os
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .core import ObjectKey, split_path, stable_hash
from .errors import DuplicateRegistration, QueueFull

log = logging.getLogger(__name__)

DEFAULT_QUEUE_BOUND = 4096


class DispatchPolicy(str, enum.Enum):
    ROUND_ROBIN = "round_robin"
    FIFO_BY_KEY = "fifo_by_key"


@dataclass(frozen=True)
class LambdaRegistration:
    lambda_id: str
    prefix: str
    policy: DispatchPolicy = DispatchPolicy.ROUND_ROBIN
    handler: Callable[[Any], None] | None = field(default=None, compare=False, hash=False)
    vertex_id: str | None = field(default=None, compare=False, hash=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "policy", DispatchPolicy(self.policy))
        split_path(self.prefix)


class _Node:
    __slots__ = ("children", "regs")

    def __init__(self) -> None:
        self.children: dict[str, _Node] = {}
        self.regs: tuple[LambdaRegistration, ...] = ()


class PrefixTrie:
    """Registrations keyed by whole path components."""

    def __init__(self) -> None:
        self._root = _Node()
        self._lock = threading.Lock()
        self._count = 0

    def __len__(self) -> int:
        return self._count

    def insert(self, reg: LambdaRegistration) -> None:
        parts = split_path(reg.prefix)
        with self._lock:
            node = self._root
            for part in parts:
                nxt = node.children.get(part)
                if nxt is None:
                    nxt = _Node()
                    node.children[part] = nxt
                node = nxt
            for r in node.regs:
                if r.lambda_id == reg.lambda_id:
                    raise DuplicateRegistration(f"{reg.lambda_id} already bound to {reg.prefix}")
            # tuple swap keeps lock-free readers consistent
            node.regs = node.regs + (reg,)
            self._count += 1

    def remove(self, reg: LambdaRegistration) -> bool:
        with self._lock:
            node = self._root
            for part in split_path(reg.prefix):
                node = node.children.get(part)
                if node is None:
                    return False
            kept = tuple(r for r in node.regs if r.lambda_id != reg.lambda_id)
            removed = len(kept) != len(node.regs)
            node.regs = kept
            self._count -= removed
            return removed

    def match(self, key: str | ObjectKey) -> list[LambdaRegistration]:
        """Registrations bound to any path-prefix of ``key``, shortest prefix first."""
        full = key.full if isinstance(key, ObjectKey) else key
        out: list[LambdaRegistration] = []
        node = self._root
        for part in full[1:].split("/"):
            node = node.children.get(part)
            if node is None:
                break
            if node.regs:
                out.extend(node.regs)
        return out

    def registrations(self) -> Iterable[LambdaRegistration]:
        stack = [self._root]
        while stack:
            node = stack.pop()
            yield from node.regs
            stack.extend(node.children.values())


class UpcallEvent:
    __slots__ = ("obj", "reg", "recv_ns", "enqueue_ns", "queue_index")

    def __init__(self, obj, reg: LambdaRegistration, recv_ns: int, enqueue_ns: int, queue_index: int):
        self.obj = obj
        self.reg = reg
        self.recv_ns = recv_ns
        self.enqueue_ns = enqueue_ns
        self.queue_index = queue_index


@dataclass
class LambdaFailure:
    lambda_id: str
    key: str
    error: str


def default_workers() -> int:
    return max(2, os.cpu_count() or 1)


def member_for(reg: LambdaRegistration, key: str, seq: int, shard_size: int) -> int:
    """Which shard member runs ``reg`` for a replicated update.

    FIFO lambdas stay on one member per key; the rest rotate by sequence
    number. Uses the high hash bits so the choice does not correlate with the
    worker-queue choice (low bits).
    """
    if shard_size <= 1:
        return 0
    if reg.policy is DispatchPolicy.FIFO_BY_KEY:
        return (stable_hash(key) >> 32) % shard_size
    return seq % shard_size


_STOP = object()


class Dispatcher:
    """Trie matcher, per-worker queues, and the worker pool."""

    def __init__(
        self,
        workers: int | None = None,
        queue_bound: int = DEFAULT_QUEUE_BOUND,
        name: str = "fastpath",
        on_upcall: Callable[[UpcallEvent, int], None] | None = None,
        start: bool = True,
    ):
        self.workers = workers or default_workers()
        self.trie = PrefixTrie()
        self.queues = [queue.Queue(maxsize=queue_bound) for _ in range(self.workers)]
        self.inbox: queue.Queue = queue.Queue(maxsize=queue_bound)
        self.on_upcall = on_upcall
        self.failures: deque[LambdaFailure] = deque(maxlen=1000)
        self.upcalls = 0
        self.upcalls_by_lambda: dict[str, int] = {}
        self.dropped = 0
        self._busy = [False] * self.workers
        self._rr: dict[tuple[str, str], int] = {}
        self._name = name
        self._threads: list[threading.Thread] = []
        if start:
            self.start()

    # -- registration -------------------------------------------------------

    def register(self, reg: LambdaRegistration) -> None:
        self.trie.insert(reg)

    def unregister(self, reg: LambdaRegistration) -> bool:
        return self.trie.remove(reg)

    def match(self, key: str | ObjectKey) -> list[LambdaRegistration]:
        return self.trie.match(key)

    # -- producer side ------------------------------------------------------

    def submit(self, obj, placement: tuple[int, int] | None = None, timeout: float | None = None) -> None:
        """Hand an object to the dispatcher thread; blocks while the inbox is full."""
        try:
            self.inbox.put((obj, placement, time.monotonic_ns()), timeout=timeout)
        except queue.Full:
            raise QueueFull("dispatcher inbox full") from None

    def dispatch(self, obj, placement: tuple[int, int] | None = None, recv_ns: int | None = None) -> int:
        """Match and enqueue; returns the number of events created."""
        if recv_ns is None:
            recv_ns = time.monotonic_ns()
        full = obj.key.full
        regs = self.trie.match(full)
        if not regs:
            self.dropped += 1
            return 0
        n = 0
        for reg in regs:
            if placement is not None:
                idx, size = placement
                if member_for(reg, full, obj.version.shard_seq, size) != idx:
                    continue
            if reg.policy is DispatchPolicy.FIFO_BY_KEY:
                qi = stable_hash(full) % self.workers
            else:
                rk = (reg.lambda_id, reg.prefix)
                c = self._rr.get(rk, 0)
                self._rr[rk] = c + 1
                qi = c % self.workers
            ev = UpcallEvent(obj, reg, recv_ns, 0, qi)
            ev.enqueue_ns = time.monotonic_ns()
            self.queues[qi].put(ev)
            n += 1
        return n

    # -- threads ------------------------------------------------------------

    def start(self) -> None:
        if self._threads:
            return
        t = threading.Thread(target=self._dispatch_loop, name=f"{self._name}-dispatch", daemon=True)
        self._threads.append(t)
        for i, q in enumerate(self.queues):
            self._threads.append(
                threading.Thread(target=self._worker_loop, args=(i, q), name=f"{self._name}-w{i}", daemon=True)
            )
        for t in self._threads:
            t.start()

    def _dispatch_loop(self) -> None:
        while True:
            item = self.inbox.get()
            if item is _STOP:
                for q in self.queues:
                    q.put(_STOP)
                return
            obj, placement, recv_ns = item
            try:
                self.dispatch(obj, placement, recv_ns)
            except Exception:
                log.exception("dispatch failed for %r", getattr(obj, "key", obj))

    def _worker_loop(self, i: int, q: queue.Queue) -> None:
        while True:
            ev = q.get()
            if ev is _STOP:
                return
            self._busy[i] = True
            start = time.monotonic_ns()
            if self.on_upcall is not None:
                self.on_upcall(ev, start)
            try:
                ev.reg.handler(ev.obj)
            except Exception as exc:
                key = getattr(getattr(ev.obj, "key", None), "full", "?")
                self.failures.append(LambdaFailure(ev.reg.lambda_id, key, repr(exc)))
                log.warning("lambda %s failed on %s: %r", ev.reg.lambda_id, key, exc)
            self.upcalls += 1
            lid = ev.reg.lambda_id
            self.upcalls_by_lambda[lid] = self.upcalls_by_lambda.get(lid, 0) + 1
            self._busy[i] = False

    def idle(self) -> bool:
        return self.inbox.empty() and all(q.empty() for q in self.queues) and not any(self._busy)

    def drain(self, timeout: float = 10.0) -> bool:
        """Wait until no event is queued or running (best effort)."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.idle():
                return True
            time.sleep(0.001)
        return False

    def stop(self) -> None:
        if not self._threads:
            return
        self.inbox.put(_STOP)
        for t in self._threads:
            t.join(timeout=5)
        self._threads = []


@dataclass(frozen=True, slots=True)
class TriggerObject:
    """A trigger-put payload: never stored, so it carries no version."""

    key: ObjectKey
    payload: bytes | memoryview
    version: None = None
