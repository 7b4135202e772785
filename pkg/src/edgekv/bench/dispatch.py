"""Fast-path breakdown on one node, plus the trie's per-level match cost."""

from __future__ import annotations

import os
import struct
import threading
import time

import numpy as np

from ..cluster import LocalCluster
from ..fastpath import DispatchPolicy, LambdaRegistration, PrefixTrie
from ..wire import FrameType
from .load import schedule
from .report import BenchReport, LatencySample, summarize

FP_POOL = "/fp"
STAMP = struct.Struct("<QQ")  # client send time, op id


def _path(depth: int) -> str:
    return "".join(f"/l{i}" for i in range(depth))


def trie_level_cost(depths=(2, 4, 8, 16, 32), registrations: int = 1000, queries: int = 20000) -> dict:
    """Time ``match`` on keys of each depth and fit ns per path level.

    Every level of every query key has a registered prefix, so the walk
    never stops early.
    """
    trie = PrefixTrie()
    for d in range(1, max(depths) + 1):
        trie.insert(LambdaRegistration(f"chain{d}", _path(d)))
    for r in range(registrations):
        trie.insert(LambdaRegistration(f"r{r}", f"/other{r % 97}/x{r}"))
    per_depth = {}
    for d in depths:
        key = _path(d) + "/leaf"
        match = trie.match
        for _ in range(200):
            match(key)
        t0 = time.perf_counter_ns()
        for _ in range(queries):
            match(key)
        per_depth[d] = (time.perf_counter_ns() - t0) / queries
    slope, intercept = np.polyfit(list(per_depth), list(per_depth.values()), 1)
    return {"ns_per_level": float(slope), "intercept_ns": float(intercept), "per_depth_ns": per_depth}


def run_fastpath_bench(
    size: int | list[int] = 10 * 1024,
    policy: str | list[str] = "round_robin",
    rate: float = 200.0,
    duration: float = 3.0,
    *,
    workers: int | None = None,
    csv_path: str | None = None,
    trie: bool = True,
) -> BenchReport:
    """Trigger puts into a single node whose pool has one no-op lambda.

    The node runs in this process so the dispatcher's per-event stamps
    (enqueue, dequeue, lambda start/end) line up with the client's clock.
    """
    sizes = [size] if isinstance(size, int) else list(size)
    policies = [policy] if isinstance(policy, str) else list(policy)
    report = BenchReport()
    for pol in policies:
        DispatchPolicy(pol)
        dfg = {"pools": [FP_POOL], "vertices": [{"id": "noop", "lambda": "noop", "pool": FP_POOL, "policy": pol}]}
        pools = [{"path": FP_POOL, "persistence": "volatile", "replication_factor": 1}]
        with LocalCluster(1, pools, mode="thread", dfg=dfg, workers=workers) as cl:
            node = cl.nodes[cl.ids[0]]
            client = cl.client()
            conn = client._conn(node.node_id)
            for sz in sizes:
                samples = _run_size(node, conn, sz, pol, rate, duration)
                report.rows.append(summarize(samples, bench="fastpath", op=pol, size=sz, rate=rate))
                report.samples.extend(samples)
    if trie:
        report.extra["trie"] = trie_level_cost()
    if csv_path:
        report.write_csv(csv_path)
    return report


def _run_size(node, conn, size: int, policy: str, rate: float, duration: float) -> list[LatencySample]:
    by_id: dict[int, LatencySample] = {}
    lock = threading.Lock()
    done = threading.Condition(lock)
    count = [0]
    disp = node.dispatcher

    def on_upcall(ev, start_ns: int) -> None:
        _, op_id = STAMP.unpack_from(ev.obj.payload, 0)
        with lock:
            s = by_id.get(op_id)
        if s is not None:
            s.recv_ns = ev.recv_ns
            s.enqueue_ns = ev.enqueue_ns
            s.dequeue_ns = start_ns

    def ended(obj) -> None:
        end = time.monotonic_ns()
        _, op_id = STAMP.unpack_from(obj.payload, 0)
        with lock:
            s = by_id.get(op_id)
            if s is not None:
                s.lambda_start_ns = s.dequeue_ns
                s.lambda_end_ns = end
                s.client_recv_ns = end
                count[0] += 1
                done.notify_all()

    reg = disp.match(f"{FP_POOL}/x")[0]
    inner = reg.handler
    disp.on_upcall = on_upcall
    object.__setattr__(reg, "handler", lambda obj: (inner(obj), ended(obj)))
    buf = bytearray(os.urandom(max(size, STAMP.size)))
    try:
        for i, at in enumerate(schedule(rate, duration)):
            s = LatencySample(i, "fastpath", policy, size, rate, scheduled_ns=at)
            with lock:
                by_id[i] = s
            key = f"{FP_POOL}/k{i % 32}"
            s.client_send_ns = time.monotonic_ns()
            STAMP.pack_into(buf, 0, s.client_send_ns, i)
            conn.send_frame(FrameType.TRIG_PUT, 0, s.client_send_ns, key, buf)
        with done:
            done.wait_for(lambda: count[0] >= len(by_id), timeout=30)
    finally:
        disp.on_upcall = None
        object.__setattr__(reg, "handler", inner)
    return [by_id[i] for i in sorted(by_id)]
