"""The node daemon: bootstrap, peer links, client request handling."""

from __future__ import annotations

import json
import logging
import os
import random
import signal
import socket
import sys
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from pathlib import Path

from . import cms
from .config import ServiceConfig
from .core import ObjectKey, Persistence, Version, map_key_to_shard
from .dfg import LambdaRegistry, Vertex, instantiate, load_dfg
from .errors import (
    BootstrapTimeout,
    EdgeKVError,
    InternalError,
    InvalidArgument,
    KeyNotFound,
    NodeUnreachable,
    QueueFull,
    ShardUnavailable,
    ViewChanged,
)
from .fastpath import Dispatcher, DispatchPolicy, LambdaRegistration, TriggerObject
from .plog import PersistentLog
from .replication import MembershipView, Sequencer, ShardInfo, ShardReplica
from .shard import LruCache, VersionedObject
from .transport import Conn, connect, unwrap
from .wire import MESSAGES, FrameType, ObjectRecord, encode

log = logging.getLogger(__name__)

TRIGGER_SUBMIT_TIMEOUT = 2.0


class Node:
    def __init__(self, cfg: ServiceConfig, *, lambdas: LambdaRegistry | None = None, trace: bool = False):
        self.cfg = cfg
        self.node_id = cfg.node_id
        self.registry = cfg.registry()
        self.trace = trace
        self.lambdas = lambdas or LambdaRegistry()
        for mod in cfg.lambda_modules:
            self.lambdas.load_module(mod)

        self.shards: dict[int, ShardInfo] = {}
        self.pool_gids: dict[str, list[int]] = {}
        gid = 0
        for ps in cfg.pools:
            self.pool_gids[ps.pool.path] = []
            for idx, members in enumerate(ps.shards):
                self.shards[gid] = ShardInfo(gid, ps.pool, idx, members)
                self.pool_gids[ps.pool.path].append(gid)
                gid += 1
        self.view = MembershipView(self.shards, [n.id for n in cfg.nodes])

        self.replicas: dict[int, ShardReplica] = {}
        self.sequencers: dict[int, Sequencer] = {}
        self.dispatcher = Dispatcher(cfg.workers, cfg.queue_bound, name=f"n{self.node_id}", start=False)
        self.cache = LruCache(cfg.cache_bytes)
        self.subs = cms.SubscriptionTable()
        self.peers: dict[int, Conn] = {}
        self._conns: set[Conn] = set()
        self._conns_lock = threading.Lock()
        self._hello: dict[int, float] = {}
        self._reports: dict[int, tuple[float, dict[int, tuple[int, int]]]] = {}
        self._last_heard: dict[int, float] = {}
        self._windows: dict[int, threading.BoundedSemaphore] = {}
        self._pool = ThreadPoolExecutor(max_workers=8, thread_name_prefix=f"n{self.node_id}-io")
        self._stop = threading.Event()
        self._listener: socket.socket | None = None
        self.ready = threading.Event()
        self.stats = {"puts": 0, "trigger_puts": 0, "gets": 0, "triggers_dropped": 0, "upcalls_dropped": 0}
        self._handlers = {
            FrameType.HEARTBEAT: self._h_heartbeat,
            FrameType.MCAST: self._h_mcast,
            FrameType.MCAST_ACK: self._h_mcast_ack,
            FrameType.PERSIST_ACK: self._h_persist_ack,
            FrameType.TRIG: self._h_trig,
            FrameType.GAP_REQ: self._h_gap_req,
            FrameType.PUT: self._h_put,
            FrameType.TRIG_PUT: self._h_trig_put,
            FrameType.GET: self._h_get,
            FrameType.GET_BY_VERSION: self._h_blocking,
            FrameType.GET_BY_TIME: self._h_blocking,
            FrameType.GET_RANGE: self._h_blocking,
            FrameType.SUBSCRIBE: self._h_subscribe,
            FrameType.PUBLISH: self._h_publish,
            FrameType.STATUS: self._h_status,
        }

    # ------------------------------------------------------------------
    # lifecycle
    # ------------------------------------------------------------------

    def start(self) -> "Node":
        cfg = self.cfg
        data_dir = Path(cfg.log_dir) / f"node{self.node_id}"
        for gid, info in self.shards.items():
            if self.node_id not in info.members:
                continue
            plog = None
            if info.pool.persistent:
                data_dir.mkdir(parents=True, exist_ok=True)
                name = info.pool.path.strip("/").replace("/", "_") + f"_shard{info.index}.log"
                plog = PersistentLog(
                    data_dir / name,
                    flush_bytes=cfg.flush_bytes,
                    flush_interval=cfg.flush_interval_us / 1e6,
                    budget_bytes=cfg.log_budget_bytes,
                    fsync=cfg.fsync,
                    on_durable=self._durable_callback(gid),
                )
            self.replicas[gid] = ShardReplica(self, info, plog, trace=self.trace)
            self._windows[gid] = threading.BoundedSemaphore(cfg.window)
        for gid in self.shards:
            self._windows.setdefault(gid, threading.BoundedSemaphore(cfg.window))

        me = cfg.me
        lst = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        lst.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        lst.bind((me.host, me.port))
        lst.listen(128)
        self._listener = lst
        threading.Thread(target=self._accept_loop, name=f"n{self.node_id}-accept", daemon=True).start()

        for r in self.replicas.values():
            r.start()
        self.dispatcher.start()
        self._bootstrap()
        for gid in self.replicas:
            if self.view.sequencer(gid) == self.node_id:
                seqr = Sequencer(self, self.replicas[gid])
                self.sequencers[gid] = seqr
                seqr.activate(takeover=False)
        self._install_lambdas()
        threading.Thread(target=self._heartbeat_loop, name=f"n{self.node_id}-hb", daemon=True).start()
        for gid, r in self.replicas.items():
            if r.log is not None:
                self._broadcast_persist(gid, r.log.durable_seq)
        self.ready.set()
        log.info("node %d up on %s:%d", self.node_id, me.host, me.port)
        return self

    def _bootstrap(self) -> None:
        cfg = self.cfg
        deadline = time.monotonic() + cfg.startup_timeout_ms / 1000
        others = [n for n in cfg.nodes if n.id != self.node_id]
        while True:
            for n in others:
                if n.id in self.peers:
                    continue
                try:
                    sock = connect(n.host, n.port, timeout=1.0)
                except OSError:
                    continue
                conn = Conn(sock, self._on_frame, self._on_close, name=f"n{self.node_id}->n{n.id}")
                conn.peer_id = n.id
                with self._conns_lock:
                    self._conns.add(conn)
                self.peers[n.id] = conn
                conn.start()
                conn.send(self._heartbeat_frame())
            missing = [n.id for n in others if n.id not in self.peers or n.id not in self._hello]
            if not missing:
                return
            if time.monotonic() > deadline:
                raise BootstrapTimeout(f"node {self.node_id}: unreachable peer(s) {missing}")
            time.sleep(0.02)

    def _install_lambdas(self) -> None:
        bound = set()
        if self.cfg.dfg:
            raw = Path(self.cfg.dfg).read_bytes()
            dfg = load_dfg(raw, self.registry, self.lambdas)
            for reg in instantiate(self, dfg, self.lambdas):
                bound.add(reg.prefix)
        # the messaging service's single vertex comes for free with its pool
        if cms.TOPIC_POOL in self.registry and cms.TOPIC_POOL not in bound and self.hosts_pool(cms.TOPIC_POOL):
            v = Vertex("cms", "cms", cms.TOPIC_POOL, DispatchPolicy.FIFO_BY_KEY)
            instantiate_vertex(self, v, self.lambdas)

    def stop(self) -> None:
        if self._stop.is_set():
            return
        self._stop.set()
        if self._listener is not None:
            try:
                # shutdown wakes the accept thread; close alone leaves the port accepting
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self._listener.close()
            except OSError:
                pass
        with self._conns_lock:
            conns = list(self._conns)
        for c in conns:
            c.on_close = None
            c.close()
        self.dispatcher.stop()
        for r in self.replicas.values():
            r.stop()
            if r.log is not None:
                r.log.close()
        self._pool.shutdown(wait=False)

    # ------------------------------------------------------------------
    # connections
    # ------------------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, addr = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = Conn(sock, self._on_frame, self._on_close, name=f"n{self.node_id}<-{addr[1]}")
            with self._conns_lock:
                self._conns.add(conn)
            conn.start()

    def _on_close(self, conn: Conn) -> None:
        with self._conns_lock:
            self._conns.discard(conn)
        self.subs.drop_conn(conn)
        if conn.peer_id is not None and not self._stop.is_set():
            threading.Thread(target=self.mark_dead, args=(conn.peer_id, "connection lost"), daemon=True).start()

    def _on_frame(self, conn: Conn, ftype: FrameType, corr: int, msg) -> None:
        if conn.peer_id is not None:
            self._last_heard[conn.peer_id] = time.monotonic()
        handler = self._handlers.get(ftype)
        if handler is None:
            conn.send_frame(FrameType.ERROR, corr, InternalError.code, f"unexpected frame {ftype.name}")
            return
        try:
            if ftype >= FrameType.PUT and ftype is not FrameType.STATUS and not self.ready.is_set():
                # a client that raced startup waits for sequencers and lambdas
                if not self.ready.wait(self.cfg.startup_timeout_ms / 1000):
                    raise ShardUnavailable(f"node {self.node_id} is still starting")
            handler(conn, corr, msg)
        except EdgeKVError as exc:
            self._reply_error(conn, corr, exc)

    @staticmethod
    def _reply_error(conn: Conn, corr: int, exc: EdgeKVError) -> None:
        try:
            conn.send_frame(FrameType.ERROR, corr, exc.code, str(exc))
        except EdgeKVError:
            pass

    def send_peer(self, node_id: int, bufs: list, quiet: bool = False) -> None:
        conn = self.peers.get(node_id)
        if conn is None or conn.closed.is_set() or node_id in self.view.dead:
            if quiet:
                return
            raise NodeUnreachable(f"node {node_id} unreachable")
        try:
            conn.send(bufs)
        except NodeUnreachable:
            if not quiet:
                raise

    # ------------------------------------------------------------------
    # membership
    # ------------------------------------------------------------------

    def _heartbeat_frame(self) -> list:
        shards = [(gid, r.delivered, r.durable_seq()) for gid, r in self.replicas.items()]
        return encode(FrameType.HEARTBEAT, 0, self.node_id, self.view.view_id, tuple(sorted(self.view.dead)), shards)

    def _heartbeat_loop(self) -> None:
        interval = self.cfg.heartbeat_interval_ms / 1000
        timeout = self.cfg.failure_timeout_ms / 1000
        commit_timeout = self.cfg.commit_timeout_ms / 1000
        while not self._stop.wait(interval):
            frame = self._heartbeat_frame()
            now = time.monotonic()
            for nid in self.view.live_nodes():
                if nid == self.node_id:
                    continue
                self.send_peer(nid, frame, quiet=True)
                if now - self._last_heard.get(nid, now) > timeout:
                    self.mark_dead(nid, "heartbeat timeout")
            for seqr in list(self.sequencers.values()):
                seqr.resend_stale(interval)
                seqr.expire(commit_timeout)

    def mark_dead(self, node_id: int, reason: str = "") -> None:
        if node_id == self.node_id or not self.view.mark_dead(node_id):
            return
        log.warning("node %d: peer %d removed (%s); view %d", self.node_id, node_id, reason, self.view.view_id)
        conn = self.peers.get(node_id)
        if conn is not None:
            conn.on_close = None
            conn.close()
        for gid, r in self.replicas.items():
            if self.view.sequencer(gid) == self.node_id and gid not in self.sequencers:
                seqr = Sequencer(self, r)
                self.sequencers[gid] = seqr
                seqr.activate(takeover=True)
            r.refresh_frontier()
        for seqr in list(self.sequencers.values()):
            seqr.recheck()

    def peer_report_time(self, node_id: int) -> float:
        return self._reports.get(node_id, (0.0, {}))[0]

    def peer_delivered(self, node_id: int, gid: int) -> int:
        return self._reports.get(node_id, (0.0, {}))[1].get(gid, (0, 0))[0]

    def _h_heartbeat(self, conn: Conn, corr: int, msg) -> None:
        now = time.monotonic()
        if conn.peer_id is None:
            conn.peer_id = msg.node_id
        self._hello.setdefault(msg.node_id, now)
        self._last_heard[msg.node_id] = now
        self._reports[msg.node_id] = (now, {g: (d, p) for g, d, p in msg.shards})
        for d in msg.dead:
            if d != self.node_id:
                self.mark_dead(d, f"reported by {msg.node_id}")
        for g, _, durable in msg.shards:
            r = self.replicas.get(g)
            if r is not None:
                r.on_persist_ack(msg.node_id, durable)

    # ------------------------------------------------------------------
    # replication plumbing
    # ------------------------------------------------------------------

    def _durable_callback(self, gid: int):
        def cb(durable_seq: int) -> None:
            self._broadcast_persist(gid, durable_seq)

        return cb

    def _broadcast_persist(self, gid: int, durable_seq: int) -> None:
        ns = time.monotonic_ns()
        frame = encode(FrameType.PERSIST_ACK, 0, gid, self.node_id, durable_seq, ns)
        for m in self.view.live(gid):
            if m != self.node_id:
                self.send_peer(m, frame, quiet=True)
        self._on_persist_ack(gid, self.node_id, durable_seq, ns)

    def _on_persist_ack(self, gid: int, node_id: int, durable_seq: int, ns: int) -> None:
        r = self.replicas.get(gid)
        if r is not None:
            r.on_persist_ack(node_id, durable_seq)
        seqr = self.sequencers.get(gid)
        if seqr is not None:
            seqr.on_persist(node_id, durable_seq, ns)

    def on_applied(self, replica: ShardReplica, msg, obj: VersionedObject, start: int, end: int) -> None:
        """Called on the delivery thread after each in-order apply."""
        gid = replica.gid
        if msg.origin == self.node_id:
            seqr = self.sequencers.get(gid)
            if seqr is not None:
                seqr.on_apply(self.node_id, msg.seq, start, end, obj.version.per_key_version)
        else:
            self.send_peer(msg.origin, encode(FrameType.MCAST_ACK, 0, gid, msg.seq, self.node_id, start, end), quiet=True)
        if len(self.dispatcher.trie):
            live = self.view.live(gid)
            idx = live.index(self.node_id) if self.node_id in live else 0
            try:
                self.dispatcher.submit(obj, (idx, len(live)), timeout=self.cfg.commit_timeout_ms / 1000)
            except QueueFull:
                # a lambda blocked on a put that needs this very thread would deadlock
                self.stats["upcalls_dropped"] += 1
                log.error("node %d: dispatcher saturated, dropped upcall for %s", self.node_id, obj.key.full)

    def _h_mcast(self, conn: Conn, corr: int, msg) -> None:
        r = self.replicas.get(msg.shard)
        if r is not None:
            r.enqueue(msg)

    def _h_mcast_ack(self, conn: Conn, corr: int, msg) -> None:
        seqr = self.sequencers.get(msg.shard)
        if seqr is not None:
            seqr.on_apply(msg.node_id, msg.seq, msg.apply_start_ns, msg.apply_end_ns)

    def _h_persist_ack(self, conn: Conn, corr: int, msg) -> None:
        self._on_persist_ack(msg.shard, msg.node_id, msg.durable_seq, msg.durable_ns)

    def _h_gap_req(self, conn: Conn, corr: int, msg) -> None:
        r = self.replicas.get(msg.shard)
        if r is None:
            return
        for frame in r.retransmit(msg.from_seq, msg.to_seq):
            self.send_peer(msg.node_id, frame, quiet=True)

    def _h_trig(self, conn: Conn, corr: int, msg) -> None:
        key = self.registry.parse_key(msg.key)
        self._dispatch_trigger(TriggerObject(key, msg.payload))

    def _dispatch_trigger(self, obj: TriggerObject) -> None:
        try:
            self.dispatcher.submit(obj, None, timeout=TRIGGER_SUBMIT_TIMEOUT)
        except EdgeKVError:
            self.stats["triggers_dropped"] += 1
            raise

    # ------------------------------------------------------------------
    # routing helpers
    # ------------------------------------------------------------------

    def parse(self, key) -> ObjectKey:
        return key if isinstance(key, ObjectKey) else self.registry.parse_key(key)

    def home_gid(self, key: ObjectKey) -> int:
        pool = self.registry[key.pool_path]
        return self.pool_gids[pool.path][map_key_to_shard(key, pool)]

    def hosts_pool(self, path: str) -> bool:
        return any(g in self.replicas for g in self.pool_gids.get(path, ()))

    def route_get(self, gid: int) -> int:
        live = self.view.live(gid)
        if not live:
            raise ShardUnavailable(f"shard {gid} has no live members")
        return random.choice(live)

    def _local_replica(self, key: ObjectKey) -> ShardReplica:
        r = self.replicas.get(self.home_gid(key))
        if r is None:
            raise ShardUnavailable(f"node {self.node_id} does not host {key.full}")
        return r

    # ------------------------------------------------------------------
    # client frames
    # ------------------------------------------------------------------

    def _h_put(self, conn: Conn, corr: int, msg) -> None:
        recv_ns = time.monotonic_ns()
        key = self.parse(msg.key)
        self._submit_put(key, msg.payload, recv_ns, corr, self._frame_reply(conn, corr))

    def _h_publish(self, conn: Conn, corr: int, msg) -> None:
        recv_ns = time.monotonic_ns()
        key = self.parse(cms.topic_key(msg.topic))
        pool = self.registry[key.pool_path]
        wanted = Persistence.PERSISTENT if msg.persistence else Persistence.VOLATILE
        if pool.persistence is not wanted:
            raise InvalidArgument(f"topic pool {pool.path} is {pool.persistence.value}, publish asked for {wanted.value}")
        self._submit_put(key, msg.payload, recv_ns, corr, self._frame_reply(conn, corr))

    def _frame_reply(self, conn: Conn, corr: int):
        def reply(ftype: FrameType, fields: dict) -> None:
            conn.send_frame(ftype, corr, **fields)

        return reply

    def _submit_put(self, key: ObjectKey, payload, recv_ns: int, corr: int, reply) -> None:
        gid = self.home_gid(key)
        seqr = self.sequencers.get(gid)
        if seqr is None:
            leader = self.view.sequencer(gid)
            if leader is None:
                raise ShardUnavailable(f"shard {gid} has no live members")
            raise ViewChanged(f"view {self.view.view_id}: shard {gid} is sequenced by node {leader}")
        self.stats["puts"] += 1
        seqr.submit(key.full, payload, reply, recv_ns, corr)

    def _h_trig_put(self, conn: Conn, corr: int, msg) -> None:
        key = self.parse(msg.key)
        self.stats["trigger_puts"] += 1
        conn.send_frame(FrameType.ACK, corr, self.node_id)
        self._dispatch_trigger(TriggerObject(key, msg.payload))

    def _h_get(self, conn: Conn, corr: int, msg) -> None:
        key = self.parse(msg.key)
        obj = self._local_replica(key).kv.get_current(key)
        self.stats["gets"] += 1
        conn.send(encode_object(corr, obj))

    def _h_blocking(self, conn: Conn, corr: int, msg) -> None:
        self._pool.submit(self._blocking_get, conn, corr, msg)

    def _blocking_get(self, conn: Conn, corr: int, msg) -> None:
        try:
            key = self.parse(msg.key)
            kv = self._local_replica(key).kv
            if hasattr(msg, "version"):
                conn.send(encode_object(corr, kv.get_by_version(key, msg.version)))
            elif hasattr(msg, "t_us"):
                timeout = (msg.timeout_ms or 10_000) / 1000
                conn.send(encode_object(corr, kv.get_by_time(key, msg.t_us, timeout)))
            else:
                objs = kv.get_range_by_version(key, msg.lo, msg.hi)
                recs = [_record(o) for o in objs]
                conn.send_frame(FrameType.OBJECTS, corr, recs)
        except EdgeKVError as exc:
            self._reply_error(conn, corr, exc)
        except Exception as exc:
            log.exception("blocking get failed")
            self._reply_error(conn, corr, InternalError(repr(exc)))

    def _h_subscribe(self, conn: Conn, corr: int, msg) -> None:
        path = cms.topic_key(msg.topic)
        if self.registry.resolve_prefix(path) is None:
            raise KeyNotFound(f"no pool contains {path}")
        self.subs.subscribe(conn, corr, msg.topic)
        conn.send_frame(FrameType.ACK, corr, self.node_id)

    def _h_status(self, conn: Conn, corr: int, msg) -> None:
        conn.send_frame(FrameType.JSON, corr, json.dumps(self.status()).encode())

    def status(self) -> dict:
        cfg = self.cfg
        return {
            "node_id": self.node_id,
            "ready": self.ready.is_set(),
            "view_id": self.view.view_id,
            "dead": sorted(self.view.dead),
            "nodes": [{"id": n.id, "host": n.host, "port": n.port} for n in cfg.nodes],
            "pools": [dict(p.pool.to_dict(), shards=[list(s) for s in p.shards]) for p in cfg.pools],
            "window": cfg.window,
            "sequencers": sorted(self.sequencers),
            "delivered": {str(g): r.delivered for g, r in self.replicas.items()},
            "durable": {str(g): r.durable_seq() for g, r in self.replicas.items()},
            "lambdas": dict(self.dispatcher.upcalls_by_lambda),
            "upcalls": self.dispatcher.upcalls,
            "lambda_failures": len(self.dispatcher.failures),
            "notified": self.subs.notified,
            "stats": dict(self.stats),
        }

    # ------------------------------------------------------------------
    # in-process API (used by lambdas)
    # ------------------------------------------------------------------

    def put_async(self, key, payload) -> Future:
        key = self.parse(key)
        gid = self.home_gid(key)
        window = self._windows[gid]
        window.acquire()
        leader = self.view.sequencer(gid)
        if leader is None:
            window.release()
            raise ShardUnavailable(f"shard {gid} has no live members")
        if leader == self.node_id:
            fut: Future = Future()

            def reply(ftype: FrameType, fields: dict) -> None:
                fut.set_result((ftype, MESSAGES[ftype](**fields)))

            try:
                self._submit_put(key, payload, time.monotonic_ns(), 0, reply)
            except EdgeKVError as exc:
                fut.set_exception(exc)
        else:
            conn = self.peers.get(leader)
            if conn is None:
                window.release()
                raise NodeUnreachable(f"node {leader} unreachable")
            fut = conn.request(FrameType.PUT, time.monotonic_ns(), key.full, payload)
        fut.add_done_callback(lambda _f: window.release())
        return fut

    def put(self, key, payload, timeout: float | None = None) -> Version:
        if timeout is None:
            timeout = self.cfg.commit_timeout_ms / 1000 + 1
        _, msg = unwrap(self.put_async(key, payload), timeout)
        return Version(msg.pkv, msg.seq, msg.ts)

    def trigger_put(self, key, payload) -> None:
        key = self.parse(key)
        target = self.route_get(self.home_gid(key))
        if target == self.node_id:
            self._dispatch_trigger(TriggerObject(key, payload))
        else:
            self.send_peer(target, encode(FrameType.TRIG, 0, self.node_id, time.monotonic_ns(), key.full, payload))

    def get(self, key) -> VersionedObject:
        key = self.parse(key)
        gid = self.home_gid(key)
        r = self.replicas.get(gid)
        if r is not None:
            return r.kv.get_current(key)
        return self._remote_object(gid, key, FrameType.GET, key.full)

    def get_by_version(self, key, version: int) -> VersionedObject:
        key = self.parse(key)
        gid = self.home_gid(key)
        r = self.replicas.get(gid)
        if r is not None:
            return r.kv.get_by_version(key, version)
        ck = (key.full, "v", version)
        hit = self.cache.cache_lookup(ck)
        if hit is not None:
            return hit
        obj = self._remote_object(gid, key, FrameType.GET_BY_VERSION, version, key.full)
        self.cache.cache_insert(ck, obj)
        return obj

    def get_by_time(self, key, t_us: int, timeout: float = 10.0) -> VersionedObject:
        key = self.parse(key)
        gid = self.home_gid(key)
        r = self.replicas.get(gid)
        if r is not None:
            return r.kv.get_by_time(key, t_us, timeout)
        ck = (key.full, "t", t_us)
        hit = self.cache.cache_lookup(ck)
        if hit is not None:
            return hit
        obj = self._remote_object(gid, key, FrameType.GET_BY_TIME, t_us, int(timeout * 1000), key.full)
        self.cache.cache_insert(ck, obj)
        return obj

    def _remote_object(self, gid: int, key: ObjectKey, ftype: FrameType, *fields) -> VersionedObject:
        target = self.route_get(gid)
        conn = self.peers.get(target)
        if conn is None:
            raise NodeUnreachable(f"node {target} unreachable")
        _, msg = unwrap(conn.request(ftype, *fields), self.cfg.commit_timeout_ms / 1000 + 1)
        return object_from_record(key, msg)


def instantiate_vertex(node: Node, v: Vertex, lambdas: LambdaRegistry) -> LambdaRegistration:
    from .dfg import DfgDescriptor

    return instantiate(node, DfgDescriptor((), (v,)), lambdas)[0]


def _record(obj: VersionedObject) -> ObjectRecord:
    v = obj.version
    prev = -1 if obj.prev is None else obj.prev
    return ObjectRecord(v.per_key_version, v.shard_seq, v.timestamp_us, prev, obj.payload_checksum, obj.key.full, obj.payload)


def encode_object(corr: int, obj: VersionedObject) -> list:
    return encode(FrameType.OBJECT, corr, *_record(obj))


def object_from_record(key: ObjectKey, rec) -> VersionedObject:
    prev = None if rec.prev < 0 else rec.prev
    return VersionedObject(key, rec.payload, Version(rec.pkv, rec.seq, rec.ts), prev, rec.checksum)


def start_node(cfg: ServiceConfig, **kwargs) -> Node:
    """Start a node; a failed bootstrap releases everything it opened."""
    sys.setswitchinterval(0.0005)
    node = Node(cfg, **kwargs)
    try:
        return node.start()
    except BaseException:
        node.stop()
        raise


def serve_forever(cfg: ServiceConfig) -> None:
    node = start_node(cfg)
    done = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: done.set())
    print(f"node {cfg.node_id} ready", flush=True)
    try:
        while not done.wait(1.0) and not node._stop.is_set():
            pass
    except KeyboardInterrupt:
        pass
    finally:
        node.stop()
        os._exit(0)
