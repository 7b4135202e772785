"""Shard membership, sequenced multicast, and all-replica commit.

Each shard's lowest-numbered live member is its sequencer. The sequencer
stamps every put with the next ``shard_seq`` and a timestamp, sends it to the
other members, and feeds its own delivery thread. Every member applies
updates strictly in ``shard_seq`` order, asking for retransmission when it
sees a gap. A volatile put completes when every live member has applied it;
a persistent put completes when every live member's log has synced it.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable

from .core import PoolDescriptor
from .errors import CommitTimeout, ShardUnavailable
from .plog import PersistentLog
from .shard import KvShard
from .wire import MESSAGES, FrameType, encode

if TYPE_CHECKING:
    from .node import Node

log = logging.getLogger(__name__)

Mcast = MESSAGES[FrameType.MCAST]

HISTORY_BYTES = 64 << 20
GAP_RETRY = 0.05


def now_us() -> int:
    return time.time_ns() // 1000


@dataclass(frozen=True)
class ShardInfo:
    gid: int
    pool: PoolDescriptor
    index: int
    members: tuple[int, ...]


class MembershipView:
    """Static membership minus the nodes detected as failed."""

    def __init__(self, shards: dict[int, ShardInfo], node_ids: list[int]):
        self.shards = shards
        self.node_ids = sorted(node_ids)
        self.dead: set[int] = set()
        self._lock = threading.Lock()

    @property
    def view_id(self) -> int:
        return 1 + len(self.dead)

    def live(self, gid: int) -> list[int]:
        return [m for m in self.shards[gid].members if m not in self.dead]

    def sequencer(self, gid: int) -> int | None:
        live = self.live(gid)
        return live[0] if live else None

    def mark_dead(self, node_id: int) -> bool:
        with self._lock:
            if node_id in self.dead or node_id not in self.node_ids:
                return False
            self.dead.add(node_id)
            return True

    def live_nodes(self) -> list[int]:
        return [n for n in self.node_ids if n not in self.dead]


@dataclass
class PendingOp:
    seq: int
    ts: int
    reply: Callable[[FrameType, dict], None]
    persistent: bool
    recv_ns: int
    created: float
    applied: dict[int, tuple[int, int]] = field(default_factory=dict)
    persisted: dict[int, int] = field(default_factory=dict)
    pkv: int | None = None


class ShardReplica:
    """This node's member of one shard: store, log, and the delivery thread."""

    def __init__(self, node: "Node", info: ShardInfo, plog: PersistentLog | None, trace: bool = False):
        self.node = node
        self.info = info
        self.gid = info.gid
        self.kv = KvShard(info.pool, plog)
        self.log = plog
        self.delivered = plog.last_seq if plog is not None else 0
        self.last_ts = plog.timestamp_of_seq(self.delivered) if plog is not None and self.delivered else 0
        self.inbox: queue.SimpleQueue = queue.SimpleQueue()
        self._pending: dict[int, object] = {}
        self._gap_asked: tuple[int, float] = (0, 0.0)
        self.history: OrderedDict[int, object] = OrderedDict()
        self._history_bytes = 0
        self._history_lock = threading.Lock()
        self.acked: dict[int, int] = {}
        self._acked_lock = threading.Lock()
        self.trace: list[int] | None = [] if trace else None
        self.apply_failures = 0
        self._delivered_cond = threading.Condition()
        self._stop = False
        self._thread = threading.Thread(target=self._run, name=f"deliver-{info.gid}", daemon=True)

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self._stop = True
        self.inbox.put(None)
        self._thread.join(timeout=5)

    def enqueue(self, msg) -> None:
        self.inbox.put(msg)

    # -- delivery -------------------------------------------------------------

    def _run(self) -> None:
        while True:
            msg = self.inbox.get()
            if msg is None:
                return
            try:
                self._offer(msg)
            except Exception:
                self.apply_failures += 1
                log.exception("shard %d: delivery failed", self.gid)

    def _offer(self, msg) -> None:
        nxt = self.delivered + 1
        if msg.seq < nxt:
            return
        if msg.seq > nxt:
            self._pending[msg.seq] = msg
            self._ask_gap(nxt, msg.seq - 1, msg.origin)
            return
        self._apply(msg)
        while self.delivered + 1 in self._pending:
            self._apply(self._pending.pop(self.delivered + 1))

    def _ask_gap(self, lo: int, hi: int, origin: int) -> None:
        now = time.monotonic()
        if self._gap_asked[0] == lo and now - self._gap_asked[1] < GAP_RETRY:
            return
        self._gap_asked = (lo, now)
        target = self.node.view.sequencer(self.gid)
        if target is None or target == self.node.node_id:
            target = origin
        self.node.send_peer(
            target, encode(FrameType.GAP_REQ, 0, self.gid, self.node.node_id, lo, hi), quiet=True
        )

    def _apply(self, msg) -> None:
        key = self.node.registry.parse_key(msg.key)
        start = time.monotonic_ns()
        obj = self.kv.apply(msg.payload, key, msg.seq, msg.ts)
        end = time.monotonic_ns()
        with self._delivered_cond:
            self.delivered = msg.seq
            self.last_ts = msg.ts
            self._delivered_cond.notify_all()
        if self.trace is not None:
            self.trace.append(msg.seq)
        self._remember(msg)
        self.node.on_applied(self, msg, obj, start, end)

    def _remember(self, msg) -> None:
        size = len(msg.payload)
        with self._history_lock:
            self.history[msg.seq] = msg
            self._history_bytes += size
            while self._history_bytes > HISTORY_BYTES and len(self.history) > 1:
                _, old = self.history.popitem(last=False)
                self._history_bytes -= len(old.payload)

    def wait_delivered(self, seq: int, timeout: float) -> bool:
        deadline = time.monotonic() + timeout
        with self._delivered_cond:
            while self.delivered < seq:
                left = deadline - time.monotonic()
                if left <= 0:
                    return False
                self._delivered_cond.wait(left)
        return True

    def retransmit(self, lo: int, hi: int) -> list:
        """Frames for delivered updates in [lo, hi] still held in history."""
        out = []
        with self._history_lock:
            for seq in range(lo, hi + 1):
                msg = self.history.get(seq)
                if msg is not None:
                    out.append(encode(FrameType.MCAST, 0, *msg))
        return out

    # -- durability -----------------------------------------------------------

    def durable_seq(self) -> int:
        return self.log.durable_seq if self.log is not None else self.delivered

    def on_persist_ack(self, node_id: int, durable_seq: int) -> None:
        if self.log is None:
            return
        with self._acked_lock:
            if durable_seq > self.acked.get(node_id, 0):
                self.acked[node_id] = durable_seq
            live = self.node.view.live(self.gid)
            vector = {m: self.acked.get(m, 0) for m in live}
        self.log.advance_frontier(vector)

    def refresh_frontier(self) -> None:
        if self.log is not None:
            self.on_persist_ack(self.node.node_id, self.log.durable_seq)


class Sequencer:
    """Ordering and commit tracking for a shard this node currently leads."""

    def __init__(self, node: "Node", replica: ShardReplica):
        self.node = node
        self.replica = replica
        self.gid = replica.gid
        self.persistent = replica.info.pool.persistent
        self._lock = threading.Lock()
        self.next_seq = replica.delivered + 1
        self.last_ts = replica.last_ts
        self.pending: dict[int, PendingOp] = {}
        self.ready = threading.Event()

    def activate(self, takeover: bool) -> None:
        if not takeover:
            self.ready.set()
            return
        threading.Thread(target=self._takeover, name=f"takeover-{self.gid}", daemon=True).start()

    def _takeover(self) -> None:
        """Catch up with the most advanced surviving member before ordering anything."""
        node = self.node
        since = time.monotonic()
        hb_wait = node.cfg.heartbeat_interval_ms / 1000 * 2.5
        deadline = since + node.cfg.failure_timeout_ms / 1000 + hb_wait
        others = [m for m in node.view.live(self.gid) if m != node.node_id]
        # fresh reports: nothing new can be sequenced after the old leader died
        while time.monotonic() < deadline:
            if all(node.peer_report_time(m) > since for m in others):
                break
            time.sleep(0.01)
        best, who = self.replica.delivered, None
        for m in others:
            d = node.peer_delivered(m, self.gid)
            if d > best:
                best, who = d, m
        if who is not None:
            node.send_peer(
                who, encode(FrameType.GAP_REQ, 0, self.gid, node.node_id, self.replica.delivered + 1, best), quiet=True
            )
            if not self.replica.wait_delivered(best, max(0.1, deadline - time.monotonic())):
                log.warning("shard %d: takeover could not reach seq %d", self.gid, best)
        with self._lock:
            self.next_seq = self.replica.delivered + 1
            self.last_ts = max(self.last_ts, self.replica.last_ts)
        log.info("node %d now sequences shard %d from seq %d", node.node_id, self.gid, self.next_seq)
        self.ready.set()

    # -- ordering -------------------------------------------------------------

    def submit(self, key_full: str, payload, reply, recv_ns: int, origin_corr: int = 0) -> None:
        if not self.ready.wait(self.node.cfg.failure_timeout_ms / 1000 * 3):
            raise ShardUnavailable(f"shard {self.gid}: sequencer not ready")
        node = self.node
        with self._lock:
            seq = self.next_seq
            self.next_seq += 1
            ts = max(now_us(), self.last_ts + 1)
            self.last_ts = ts
            op = PendingOp(seq, ts, reply, self.persistent, recv_ns, time.monotonic())
            self.pending[seq] = op
            msg = Mcast(self.gid, seq, ts, node.view.view_id, node.node_id, origin_corr, recv_ns, key_full, payload)
            members = node.view.live(self.gid)
            if len(members) > 1:
                bufs = encode(FrameType.MCAST, 0, *msg)
                for m in members:
                    if m != node.node_id:
                        node.send_peer(m, bufs, quiet=True)
            self.replica.enqueue(msg)

    # -- acknowledgements -----------------------------------------------------

    def on_apply(self, node_id: int, seq: int, start: int, end: int, pkv: int | None = None) -> None:
        done = None
        with self._lock:
            op = self.pending.get(seq)
            if op is None:
                return
            op.applied[node_id] = (start, end)
            if pkv is not None:
                op.pkv = pkv
            if self._complete(op):
                done = self.pending.pop(seq)
        if done is not None:
            self._reply(done)

    def on_persist(self, node_id: int, durable_seq: int, ns: int) -> None:
        done = []
        with self._lock:
            for seq, op in list(self.pending.items()):
                if seq > durable_seq:
                    break
                if op.persistent and node_id not in op.persisted:
                    op.persisted[node_id] = ns
                    if self._complete(op):
                        done.append(self.pending.pop(seq))
        for op in done:
            self._reply(op)

    def recheck(self) -> None:
        """Membership shrank: some pending ops may now be complete."""
        done = []
        with self._lock:
            for seq, op in list(self.pending.items()):
                if self._complete(op):
                    done.append(self.pending.pop(seq))
        for op in done:
            self._reply(op)

    def _complete(self, op: PendingOp) -> bool:
        if op.pkv is None:
            return False
        live = self.node.view.live(self.gid)
        if any(m not in op.applied for m in live):
            return False
        if op.persistent and any(m not in op.persisted for m in live):
            return False
        return True

    def _reply(self, op: PendingOp) -> None:
        starts = [a[0] for a in op.applied.values()]
        ends = [a[1] for a in op.applied.values()]
        persisted = max(op.persisted.values()) if op.persisted else 0
        fields = dict(
            pkv=op.pkv, seq=op.seq, ts=op.ts, node_id=self.node.node_id, seq_recv_ns=op.recv_ns,
            delivered_ns=max(starts), applied_ns=max(ends), persisted_ns=persisted, reply_ns=time.monotonic_ns(),
        )
        try:
            op.reply(FrameType.VERSION, fields)
        except Exception as exc:
            log.debug("shard %d: reply for seq %d failed: %r", self.gid, op.seq, exc)

    def resend_stale(self, age: float) -> int:
        """Send ops older than ``age`` again to members that have not applied them."""
        now = time.monotonic()
        todo = []
        with self._lock:
            live = self.node.view.live(self.gid)
            for seq, op in self.pending.items():
                if now - op.created > age:
                    missing = [m for m in live if m not in op.applied and m != self.node.node_id]
                    if missing:
                        todo.append((seq, missing))
        for seq, missing in todo:
            for frame in self.replica.retransmit(seq, seq):
                for m in missing:
                    self.node.send_peer(m, frame, quiet=True)
        return len(todo)

    def expire(self, timeout: float) -> None:
        now = time.monotonic()
        expired = []
        with self._lock:
            for seq, op in list(self.pending.items()):
                if now - op.created > timeout:
                    expired.append(self.pending.pop(seq))
        for op in expired:
            live = self.node.view.live(self.gid)
            lagging = [m for m in live if m not in op.applied or (op.persistent and m not in op.persisted)]
            err = CommitTimeout(f"shard {self.gid} seq {op.seq} not committed; lagging={lagging}", lagging)
            try:
                op.reply(FrameType.ERROR, dict(code=err.code, message=str(err)))
            except Exception:
                pass

    def fail_all(self, exc) -> None:
        with self._lock:
            ops, self.pending = list(self.pending.values()), {}
        for op in ops:
            try:
                op.reply(FrameType.ERROR, dict(code=exc.code, message=str(exc)))
            except Exception:
                pass
