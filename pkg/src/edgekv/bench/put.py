"""Put latency and throughput by put type, object size and offered rate."""

from __future__ import annotations

import itertools
import os
import threading
import time

from ..client import Client
from ..transport import unwrap
from ..wire import FrameType
from .load import PERS_POOL, VOLA_POOL, bench_pools, maybe_cluster, schedule
from .report import BenchReport, LatencySample, summarize

OPS = ("trig", "vola", "pers")
KEYS_PER_CLIENT = 64


def _one_client(
    client: Client, op: str, cid: int, size: int, rate: float, duration: float, total_rate: float,
    samples: list, lock: threading.Lock, ids, start_ns: int,
) -> None:
    payload = os.urandom(size)
    pool = PERS_POOL if op == "pers" else VOLA_POOL
    keys = [client.view.registry.parse_key(f"{pool}/c{cid}k{i}") for i in range(KEYS_PER_CLIENT)]
    outstanding = []
    for i, at in enumerate(schedule(rate, duration, start_ns)):
        s = LatencySample(next(ids), "put", op, size, total_rate, client=cid, scheduled_ns=at)
        key = keys[i % KEYS_PER_CLIENT]
        s.client_send_ns = time.monotonic_ns()
        try:
            if op == "trig":
                gid = client.view.home(key)
                conn = client._conn(client._reader(gid, None))
                fut = conn.request(FrameType.TRIG_PUT, s.client_send_ns, key.full, payload)
            else:
                fut = client.put_async(key, payload)
                # the window may have held the send back
                s.client_send_ns = fut.client_send_ns
        except Exception as exc:
            s.error = type(exc).__name__
            with lock:
                samples.append(s)
            continue
        fut.add_done_callback(lambda f, s=s: _complete(s, f))
        outstanding.append((s, fut))
    for s, fut in outstanding:
        try:
            fut.result(30)
        except Exception:
            pass
    with lock:
        samples.extend(s for s, _ in outstanding)


def _complete(s: LatencySample, fut) -> None:
    s.client_recv_ns = time.monotonic_ns()
    try:
        ftype, msg = unwrap(fut, 0)
    except Exception as exc:
        s.error = type(exc).__name__
        return
    if ftype is FrameType.VERSION:
        s.seq_recv_ns = msg.seq_recv_ns
        s.delivered_ns = msg.delivered_ns
        s.applied_ns = msg.applied_ns
        s.persisted_ns = msg.persisted_ns
        s.reply_ns = msg.reply_ns


def _run_rate(seeds, op: str, size: int, rate: float, duration: float, clients: int) -> tuple[list, float]:
    samples: list[LatencySample] = []
    lock = threading.Lock()
    ids = itertools.count()
    cls = [Client(seeds) for _ in range(clients)]
    try:
        # warm connections so the first samples do not pay for the handshake
        for c in cls:
            for n in c.view.nodes:
                c._conn(n)
        start = time.monotonic_ns() + 20_000_000
        threads = [
            threading.Thread(
                target=_one_client,
                args=(c, op, i, size, rate / clients, duration, rate, samples, lock, ids, start + i * int(1e9 / rate)),
            )
            for i, c in enumerate(cls)
        ]
        t0 = time.monotonic()
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        wall = time.monotonic() - t0
    finally:
        for c in cls:
            c.close()
    samples.sort(key=lambda s: s.op_id)
    return samples, wall


def run_put_bench(
    op: str | list[str],
    size: int = 10 * 1024,
    rate: float | list[float] = 100.0,
    duration: float = 5.0,
    shard_size: int = 3,
    clients: int = 1,
    *,
    seeds=None,
    mode: str = "process",
    baseline: bool = True,
    csv_path: str | None = None,
    warmup: float = 0.5,
) -> BenchReport:
    """Fixed-rate open-loop puts; one summary row per (op, rate).

    With ``baseline`` set, each op also runs at 10% of its lowest rate first,
    and rows whose p99 is 10x that baseline p99 are flagged as saturated.
    """
    ops = [op] if isinstance(op, str) else list(op)
    rates = [rate] if isinstance(rate, (int, float)) else list(rate)
    for o in ops:
        if o not in OPS:
            raise ValueError(f"op must be one of {OPS}, not {o!r}")
    report = BenchReport()
    with maybe_cluster(seeds, shard_size, bench_pools(shard_size), mode) as live_seeds:
        for o in ops:
            if warmup > 0:
                _run_rate(live_seeds, o, size, min(rates), warmup, 1)
            base_p99 = None
            if baseline:
                low = max(min(rates) / 10, 1.0)
                samples, wall = _run_rate(live_seeds, o, size, low, max(duration, 20 / low), 1)
                base_p99 = summarize(samples, bench="put", op=o, size=size, rate=low).p99_us
            rows = []
            for r in rates:
                samples, wall = _run_rate(live_seeds, o, size, r, duration, clients)
                row = summarize(samples, bench="put", op=o, size=size, rate=r, clients=clients)
                rows.append(row)
                report.rows.append(row)
                report.samples.extend(samples)
            if base_p99 is not None:
                sub = BenchReport(rows=rows)
                sub.mark_saturation(base_p99)
                report.annotations.extend(sub.annotations)
                report.extra[f"baseline_p99_us_{o}"] = base_p99
    if csv_path:
        report.write_csv(csv_path)
    return report
