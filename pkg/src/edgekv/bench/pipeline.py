"""The k-stage no-op pipeline: end-to-end latency and sustained throughput."""

from __future__ import annotations

import itertools
import os
import struct
import threading
import time

import numpy as np

from ..client import Client
from ..cluster import LocalCluster
from ..dfg import load_dfg
from ..wire import FrameType
from .load import schedule
from .report import BenchReport, LatencySample, summarize

EDGE_TYPES = ("trigger", "volatile")
STAMP = struct.Struct("<QQ")  # injection time, op id


def stage_pool(i: int) -> str:
    return f"/stage{i}"


def pipeline_dfg(k: int, edge_type: str, policy: str = "round_robin") -> dict:
    """Stages 1..k-1 relay to the next stage's pool; stage k notifies subscribers."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if edge_type not in EDGE_TYPES:
        raise ValueError(f"edge type must be one of {EDGE_TYPES}")
    vertices = [
        {"id": f"s{i}", "lambda": "relay" if i < k else "notify", "pool": stage_pool(i), "policy": policy}
        for i in range(1, k + 1)
    ]
    edges = [{"from": f"s{i}", "to": stage_pool(i + 1), "put_type": edge_type} for i in range(1, k)]
    dfg = {"pools": [stage_pool(i) for i in range(1, k + 1)], "vertices": vertices, "edges": edges}
    load_dfg(dfg)
    return dfg


def pipeline_pools(k: int, shard_size: int) -> list[dict]:
    return [
        {"path": stage_pool(i), "persistence": "volatile", "replication_factor": shard_size} for i in range(1, k + 1)
    ]


class PipelineDriver:
    """Injects stamped objects into stage 1 and times their arrival at stage k."""

    def __init__(self, client: Client, k: int, edge_type: str, size: int):
        self.client = client
        self.k = k
        self.edge_type = edge_type
        self.size = max(size, STAMP.size)
        self._pad = os.urandom(self.size - STAMP.size)
        self._ids = itertools.count()
        self.samples: dict[int, LatencySample] = {}
        self.arrived = 0
        self.duplicates = 0
        self._cond = threading.Condition()
        self.sub = client.subscribe(stage_pool(k), callback=self._on_note)
        self._key_cache = [client.view.registry.parse_key(f"{stage_pool(1)}/o{i}") for i in range(256)]

    def _on_note(self, note) -> None:
        sent, op_id = STAMP.unpack_from(note.payload, 0)
        with self._cond:
            s = self.samples.get(op_id)
            if s is None:
                return
            if s.client_recv_ns:
                self.duplicates += 1
                return
            s.client_recv_ns = note.recv_ns
            self.arrived += 1
            self._cond.notify_all()

    def inject(self, scheduled_ns: int = 0, rate: float = 0.0):
        op_id = next(self._ids)
        s = LatencySample(op_id, "pipeline", self.edge_type, self.size, rate, k=self.k, scheduled_ns=scheduled_ns)
        key = self._key_cache[op_id % len(self._key_cache)]
        with self._cond:
            self.samples[op_id] = s
        s.client_send_ns = time.monotonic_ns()
        payload = STAMP.pack(s.client_send_ns, op_id) + self._pad
        if self.edge_type == "trigger":
            gid = self.client.view.home(key)
            conn = self.client._conn(self.client._reader(gid, None))
            fut = conn.request(FrameType.TRIG_PUT, s.client_send_ns, key.full, payload)
        else:
            fut = self.client.put_async(key, payload)
        fut.add_done_callback(lambda f, s=s: _note_error(s, f))
        return s

    def wait(self, count: int, timeout: float) -> bool:
        deadline = time.monotonic() + timeout
        with self._cond:
            while self.arrived < count:
                left = deadline - time.monotonic()
                if left <= 0:
                    return False
                self._cond.wait(left)
        return True

    def in_flight(self) -> int:
        with self._cond:
            return len(self.samples) - self.arrived


def _note_error(s: LatencySample, fut) -> None:
    try:
        ftype, msg = fut.result(0)
    except Exception as exc:
        s.error = type(exc).__name__
        return
    if ftype is FrameType.ERROR:
        s.error = f"error {msg.code}"


def _latency_run(driver: PipelineDriver, rate: float, duration: float) -> list[LatencySample]:
    first = len(driver.samples)
    for at in schedule(rate, duration):
        driver.inject(at, rate)
    driver.wait(len(driver.samples), timeout=30)
    return [driver.samples[i] for i in range(first, len(driver.samples))]


def _throughput_run(driver: PipelineDriver, inflight: int, duration: float) -> tuple[list[LatencySample], float]:
    """Closed loop with ``inflight`` objects outstanding; returns samples and wall time."""
    first = len(driver.samples)
    t0 = time.monotonic()
    end = t0 + duration
    while time.monotonic() < end:
        with driver._cond:
            while len(driver.samples) - driver.arrived >= inflight and time.monotonic() < end:
                driver._cond.wait(0.05)
        if time.monotonic() >= end:
            break
        driver.inject()
    injected = len(driver.samples)
    driver.wait(injected, timeout=30)
    wall = time.monotonic() - t0
    return [driver.samples[i] for i in range(first, injected)], wall


def run_pipeline_bench(
    k: int | list[int],
    edge_type: str | list[str] = "trigger",
    size: int = 1024,
    rate: float = 50.0,
    duration: float = 3.0,
    *,
    nodes: int = 3,
    shard_size: int = 3,
    inflight: int = 16,
    mode: str = "process",
    throughput: bool = True,
    csv_path: str | None = None,
    warmup: int = 20,
) -> BenchReport:
    """One loopback cluster per (k, edge type).

    Latency rows come from open-loop injection at ``rate``; throughput rows
    (op ``<edge>-tput``) from a closed loop with ``inflight`` outstanding.
    """
    ks = [k] if isinstance(k, int) else list(k)
    edges = [edge_type] if isinstance(edge_type, str) else list(edge_type)
    report = BenchReport()
    for e in edges:
        for kk in ks:
            dfg = pipeline_dfg(kk, e)
            with LocalCluster(nodes, pipeline_pools(kk, shard_size), mode=mode, dfg=dfg) as cl:
                client = cl.client()
                for n in client.view.nodes:
                    client._conn(n)
                driver = PipelineDriver(client, kk, e, size)
                for _ in range(warmup):
                    driver.inject()
                    driver.wait(len(driver.samples), 10)
                samples = _latency_run(driver, rate, duration)
                report.rows.append(summarize(samples, bench="pipeline", op=e, size=driver.size, rate=rate, k=kk))
                report.samples.extend(samples)
                if throughput:
                    tsamples, wall = _throughput_run(driver, inflight, duration)
                    row = summarize(tsamples, bench="pipeline", op=f"{e}-tput", size=driver.size, rate=0, k=kk, wall_s=wall)
                    report.rows.append(row)
                    report.samples.extend(tsamples)
                report.extra[f"duplicates_{e}_k{kk}"] = driver.duplicates
                driver.sub.close()
        lat = [(r.k, r.p50_us) for r in report.rows if r.op == e]
        if len(lat) >= 2:
            slope = np.polyfit([x for x, _ in lat], [y for _, y in lat], 1)[0]
            report.extra[f"per_stage_us_{e}"] = float(slope)
    if csv_path:
        report.write_csv(csv_path)
    return report

