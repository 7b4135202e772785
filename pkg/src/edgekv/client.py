"""Client library: routing, windows, the get family, and subscriptions."""

from __future__ import annotations

import json
import logging
import queue
import random
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass

from . import cms
from .core import ObjectKey, PoolDescriptor, PoolRegistry, Version, map_key_to_shard
from .errors import (
    EdgeKVError,
    NodeUnreachable,
    ShardUnavailable,
    Timeout,
    ViewChanged,
    error_from_code,
)
from .shard import VersionedObject
from .transport import Conn, connect, unwrap
from .wire import FrameType

log = logging.getLogger(__name__)

RETRYABLE = (ViewChanged, NodeUnreachable, ShardUnavailable)


@dataclass(frozen=True)
class Notification:
    topic: str
    version: Version
    payload: memoryview
    recv_ns: int
    node_id: int


class ClusterView:
    """What a client knows about the cluster, built from a STATUS reply."""

    def __init__(self, status: dict):
        self.view_id = status["view_id"]
        self.dead = set(status["dead"])
        self.nodes = {n["id"]: (n["host"], n["port"]) for n in status["nodes"]}
        self.window = status.get("window", 3)
        pools = [PoolDescriptor.from_dict(p) for p in status["pools"]]
        self.registry = PoolRegistry(pools)
        self.shards: dict[int, tuple[int, ...]] = {}
        self.pool_gids: dict[str, list[int]] = {}
        gid = 0
        for p in status["pools"]:
            self.pool_gids[p["path"]] = []
            for members in p["shards"]:
                self.shards[gid] = tuple(members)
                self.pool_gids[p["path"]].append(gid)
                gid += 1

    def home(self, key: ObjectKey) -> int:
        pool = self.registry[key.pool_path]
        return self.pool_gids[pool.path][map_key_to_shard(key, pool)]

    def live(self, gid: int) -> list[int]:
        return [m for m in self.shards[gid] if m not in self.dead]

    def sequencer(self, gid: int) -> int:
        live = self.live(gid)
        if not live:
            raise ShardUnavailable(f"shard {gid} has no live members")
        return live[0]


class Subscription:
    """Notifications for one topic, gathered from every member that may send them."""

    def __init__(self, topic: str, dedup: bool, callback=None):
        self.topic = topic
        self.callback = callback
        self._dedup = dedup
        self._seen: set[int] = set()
        self._lock = threading.Lock()
        self.queue: queue.Queue = queue.Queue()
        self.errors: list[EdgeKVError] = []
        self.duplicates = 0
        self._streams: list[tuple[Conn, int]] = []

    def _on_frame(self, node_id: int, ftype, msg) -> None:
        if ftype is None:
            return
        if ftype is FrameType.ERROR:
            self.errors.append(error_from_code(msg.code, msg.message))
            return
        if ftype is not FrameType.NOTIFY:
            return
        if self._dedup:
            with self._lock:
                if msg.shard_seq in self._seen:
                    self.duplicates += 1
                    return
                self._seen.add(msg.shard_seq)
        note = Notification(msg.topic, Version(msg.seq, msg.shard_seq, msg.ts), msg.payload, time.monotonic_ns(), node_id)
        if self.callback is not None:
            self.callback(note)
        else:
            self.queue.put(note)

    def get(self, timeout: float | None = None) -> Notification:
        try:
            return self.queue.get(timeout=timeout)
        except queue.Empty:
            raise Timeout(f"no notification on {self.topic}") from None

    def __iter__(self):
        while True:
            yield self.queue.get()

    def close(self) -> None:
        for conn, corr in self._streams:
            conn.streams.pop(corr, None)
        self._streams = []


class Client:
    def __init__(self, seeds, timeout: float = 15.0, retries: int = 5):
        if isinstance(seeds, str):
            seeds = [_parse_addr(s) for s in seeds.split(",")]
        self.seeds = list(seeds)
        self.timeout = timeout
        self.retries = retries
        self._conns: dict[int, Conn] = {}
        self._lock = threading.Lock()
        self._windows: dict[int, threading.BoundedSemaphore] = {}
        self.view = self._fetch_view()

    # -- cluster view -------------------------------------------------------

    def _fetch_view(self) -> ClusterView:
        last = None
        candidates = list(self.seeds)
        view = getattr(self, "view", None)
        if view is not None:
            candidates = [view.nodes[n] for n in view.nodes if n not in view.dead] + candidates
        for host, port in candidates:
            try:
                sock = connect(host, port, timeout=2.0)
            except OSError as exc:
                last = exc
                continue
            conn = Conn(sock, name=f"client->{host}:{port}").start()
            try:
                _, msg = unwrap(conn.request(FrameType.STATUS), self.timeout)
                new = ClusterView(json.loads(bytes(msg.data)))
            except EdgeKVError as exc:
                last = exc
                conn.close()
                continue
            conn.close()
            for gid in new.shards:
                self._windows.setdefault(gid, threading.BoundedSemaphore(new.window))
            return new
        raise NodeUnreachable(f"no node answered STATUS: {last}")

    def refresh(self) -> ClusterView:
        self.view = self._fetch_view()
        return self.view

    def _conn(self, node_id: int) -> Conn:
        with self._lock:
            conn = self._conns.get(node_id)
            if conn is not None and not conn.closed.is_set():
                return conn
            host, port = self.view.nodes[node_id]
            try:
                sock = connect(host, port, timeout=2.0)
            except OSError as exc:
                raise NodeUnreachable(f"node {node_id} at {host}:{port}: {exc}") from None
            conn = Conn(sock, name=f"client->n{node_id}").start()
            self._conns[node_id] = conn
            return conn

    def _key(self, key) -> ObjectKey:
        return key if isinstance(key, ObjectKey) else self.view.registry.parse_key(key)

    def _reader(self, gid: int, node_id: int | None) -> int:
        if node_id is not None:
            return node_id
        live = self.view.live(gid)
        if not live:
            raise ShardUnavailable(f"shard {gid} has no live members")
        return random.choice(live)

    def _retrying(self, op):
        """Run ``op`` again after a view refresh when the cluster moved under it."""
        for attempt in range(self.retries + 1):
            try:
                return op()
            except RETRYABLE:
                if attempt == self.retries:
                    raise
                time.sleep(min(0.05 * 2**attempt, 1.0))
                try:
                    self.refresh()
                except NodeUnreachable:
                    pass

    # -- puts -----------------------------------------------------------------

    def put_async(self, key, payload) -> Future:
        """Send a put to the shard's sequencer; resolves to ``(FrameType, message)``.

        At most ``window`` puts per shard are outstanding; this blocks for a
        slot. The future's ``client_send_ns`` is when the request went out.
        """
        k = self._key(key)
        gid = self.view.home(k)
        window = self._windows[gid]
        window.acquire()
        try:
            conn = self._conn(self.view.sequencer(gid))
            sent = time.monotonic_ns()
            fut = conn.request(FrameType.PUT, sent, k.full, payload)
            fut.client_send_ns = sent
        except BaseException:
            window.release()
            raise
        fut.add_done_callback(lambda _f: window.release())
        return fut

    def put_detail(self, key, payload):
        """A put that returns the full VERSION reply, including commit timings."""

        def op():
            _, msg = unwrap(self.put_async(key, payload), self.timeout)
            return msg

        return self._retrying(op)

    def put(self, key, payload) -> Version:
        msg = self.put_detail(key, payload)
        return Version(msg.pkv, msg.seq, msg.ts)

    def trigger_put(self, key, payload, node_id: int | None = None) -> None:
        k = self._key(key)

        def op():
            target = self._reader(self.view.home(k), node_id)
            unwrap(self._conn(target).request(FrameType.TRIG_PUT, time.monotonic_ns(), k.full, payload), self.timeout)

        self._retrying(op)

    # -- gets -----------------------------------------------------------------

    def _get_object(self, k: ObjectKey, node_id: int | None, ftype: FrameType, *fields, timeout=None):
        def op():
            target = self._reader(self.view.home(k), node_id)
            _, msg = unwrap(self._conn(target).request(ftype, *fields), timeout or self.timeout)
            return msg

        return self._retrying(op)

    def get(self, key, node_id: int | None = None) -> VersionedObject:
        k = self._key(key)
        return _object(k, self._get_object(k, node_id, FrameType.GET, k.full))

    def get_by_version(self, key, version: int, node_id: int | None = None) -> VersionedObject:
        k = self._key(key)
        return _object(k, self._get_object(k, node_id, FrameType.GET_BY_VERSION, version, k.full))

    def get_by_time(self, key, t_us: int, timeout: float = 10.0, node_id: int | None = None) -> VersionedObject:
        k = self._key(key)
        msg = self._get_object(
            k, node_id, FrameType.GET_BY_TIME, t_us, int(timeout * 1000), k.full, timeout=timeout + self.timeout
        )
        return _object(k, msg)

    def get_range(self, key, lo: int, hi: int, node_id: int | None = None) -> list[VersionedObject]:
        k = self._key(key)
        msg = self._get_object(k, node_id, FrameType.GET_RANGE, lo, hi, k.full)
        return [_object(k, rec) for rec in msg.objects]

    # -- messaging ------------------------------------------------------------

    def publish(self, topic: str, payload, persistent: bool = False):
        """Publish to a topic; returns the VERSION reply once every replica has it."""
        k = self._key(cms.topic_key(topic))

        def op():
            gid = self.view.home(k)
            window = self._windows[gid]
            with window:
                conn = self._conn(self.view.sequencer(gid))
                fut = conn.request(FrameType.PUBLISH, int(persistent), time.monotonic_ns(), topic, payload)
                _, msg = unwrap(fut, self.timeout)
            return msg

        return self._retrying(op)

    def subscribe(self, topic: str, callback=None) -> Subscription:
        """Stream notifications for ``topic`` (a name, or a path beginning with '/').

        The notifying member for a key is not known in advance, so the stream
        is opened at every member that could send it.
        """
        path = cms.topic_key(topic)
        pool = self.view.registry.resolve_prefix(path)
        if pool is None:
            raise ShardUnavailable(f"no pool contains {path}")
        exact = not topic.startswith("/")
        if exact:
            gids = [self.view.home(self._key(path))]
        else:
            gids = self.view.pool_gids[pool.path]
        members = sorted({m for g in gids for m in self.view.live(g)})
        sub = Subscription(topic, dedup=exact, callback=callback)
        futs = []
        for m in members:
            conn = self._conn(m)
            fut = conn.open_stream(FrameType.SUBSCRIBE, lambda ft, msg, m=m: sub._on_frame(m, ft, msg), topic)
            futs.append((conn, fut))
        for conn, fut in futs:
            unwrap(fut, self.timeout)
            sub._streams.append((conn, fut.corr))
        return sub

    # -- admin ----------------------------------------------------------------

    def status(self, node_id: int | None = None) -> dict:
        target = node_id if node_id is not None else random.choice([n for n in self.view.nodes if n not in self.view.dead])
        _, msg = unwrap(self._conn(target).request(FrameType.STATUS), self.timeout)
        return json.loads(bytes(msg.data))

    def close(self) -> None:
        with self._lock:
            conns, self._conns = list(self._conns.values()), {}
        for c in conns:
            c.close()

    def __enter__(self) -> "Client":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _object(key: ObjectKey, rec) -> VersionedObject:
    prev = None if rec.prev < 0 else rec.prev
    return VersionedObject(key, rec.payload, Version(rec.pkv, rec.seq, rec.ts), prev, rec.checksum)


def _parse_addr(s: str) -> tuple[str, int]:
    host, _, port = s.strip().rpartition(":")
    return (host or "127.0.0.1", int(port))
