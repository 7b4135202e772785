"""Open-loop pacing and the benchmark cluster setup."""

from __future__ import annotations

import time
from contextlib import contextmanager
from typing import Iterator

from ..cluster import LocalCluster

VOLA_POOL = "/bench/vola"
PERS_POOL = "/bench/pers"


def schedule(rate: float, duration: float, start_ns: int | None = None) -> Iterator[int]:
    """Yield absolute send times ``1/rate`` apart, sleeping until each one.

    Times are fixed in advance, so a late send does not push later ones back.
    """
    if rate <= 0:
        raise ValueError("rate must be positive")
    period = int(1e9 / rate)
    t0 = start_ns if start_ns is not None else time.monotonic_ns()
    n = int(rate * duration)
    for i in range(n):
        at = t0 + i * period
        delay = at - time.monotonic_ns()
        if delay > 0:
            time.sleep(delay / 1e9)
        yield at


def bench_pools(shard_size: int) -> list[dict]:
    return [
        {"path": VOLA_POOL, "persistence": "volatile", "replication_factor": shard_size},
        {"path": PERS_POOL, "persistence": "persistent", "replication_factor": shard_size},
    ]


@contextmanager
def maybe_cluster(seeds, n: int, pools: list[dict], mode: str, **kwargs):
    """Use the given cluster if ``seeds`` is set, otherwise start a loopback one."""
    if seeds:
        yield seeds
        return
    with LocalCluster(n, pools, mode=mode, **kwargs) as cl:
        yield cl.seeds
