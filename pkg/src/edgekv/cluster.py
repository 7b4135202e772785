"""Loopback clusters for tests and benchmarks, in threads or in child processes."""

from __future__ import annotations

import json
import os
import signal
import socket
import subprocess
import sys
import tempfile
import threading
import time
from pathlib import Path

from .client import Client
from .config import ServiceConfig
from .errors import BootstrapTimeout, EdgeKVError
from .node import Node, start_node


def free_ports(n: int) -> list[int]:
    socks, ports = [], []
    for _ in range(n):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
        ports.append(s.getsockname()[1])
    for s in socks:
        s.close()
    return ports


def cluster_config(n: int, pools: list[dict], **overrides) -> dict:
    """A config dict for ``n`` loopback nodes; ``node_id`` is filled per node."""
    ports = free_ports(n)
    cfg = {
        "node_id": 1,
        "nodes": [{"id": i + 1, "host": "127.0.0.1", "port": p} for i, p in enumerate(ports)],
        "pools": pools,
    }
    cfg.update(overrides)
    return cfg


class LocalCluster:
    """``n`` nodes on 127.0.0.1.

    ``mode="thread"`` runs every node in this process, which is cheap and lets
    tests reach into node state. ``mode="process"`` runs ``python3 -m edgekv
    node start`` per node, so a kill is a real SIGKILL.
    """

    def __init__(
        self,
        n: int,
        pools: list[dict],
        *,
        mode: str = "thread",
        dfg: dict | None = None,
        workdir: str | os.PathLike | None = None,
        **overrides,
    ):
        if mode not in ("thread", "process"):
            raise ValueError(f"mode must be thread or process, not {mode!r}")
        self.mode = mode
        self._tmp = None
        if workdir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="edgekv-")
            workdir = self._tmp.name
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        overrides.setdefault("log_dir", str(self.workdir / "data"))
        if dfg is not None:
            dfg_path = self.workdir / "dfg.json"
            dfg_path.write_text(json.dumps(dfg, indent=2))
            overrides["dfg"] = str(dfg_path)
        self.base = cluster_config(n, pools, **overrides)
        self.ids = [nd["id"] for nd in self.base["nodes"]]
        self.nodes: dict[int, Node] = {}
        self.procs: dict[int, subprocess.Popen] = {}
        self._clients: list[Client] = []

    def config(self, node_id: int) -> ServiceConfig:
        return ServiceConfig.from_dict(dict(self.base, node_id=node_id))

    def config_path(self, node_id: int) -> Path:
        path = self.workdir / f"node{node_id}.json"
        path.write_text(json.dumps(dict(self.base, node_id=node_id), indent=2))
        return path

    @property
    def seeds(self) -> list[tuple[str, int]]:
        return [(nd["host"], nd["port"]) for nd in self.base["nodes"]]

    # -- lifecycle ------------------------------------------------------------

    def start(self, timeout: float = 30.0) -> "LocalCluster":
        if self.mode == "thread":
            errors: list[BaseException] = []

            def run(i: int) -> None:
                try:
                    self.nodes[i] = start_node(self.config(i))
                except BaseException as exc:
                    errors.append(exc)

            threads = [threading.Thread(target=run, args=(i,)) for i in self.ids]
            for t in threads:
                t.start()
            for t in threads:
                t.join(timeout)
            if errors:
                self.stop()
                raise errors[0]
        else:
            for i in self.ids:
                self._spawn(i)
            self._wait_ready(self.ids, timeout)
        return self

    def _spawn(self, node_id: int) -> None:
        log = open(self.workdir / f"node{node_id}.out", "ab")
        env = dict(os.environ)
        src = str(Path(__file__).resolve().parents[1])
        env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
        self.procs[node_id] = subprocess.Popen(
            [sys.executable, "-m", "edgekv", "node", "start", "--config", str(self.config_path(node_id))],
            stdout=log,
            stderr=subprocess.STDOUT,
            env=env,
        )
        log.close()

    def _wait_ready(self, ids, timeout: float) -> None:
        deadline = time.monotonic() + timeout
        pending = set(ids)
        while pending:
            for i in list(pending):
                proc = self.procs[i]
                if proc.poll() is not None:
                    out = (self.workdir / f"node{i}.out").read_text(errors="replace")
                    self.stop()
                    raise BootstrapTimeout(f"node {i} exited with {proc.returncode}:\n{out[-2000:]}")
                host, port = self.seeds[self.ids.index(i)]
                try:
                    with Client([(host, port)], timeout=1.0, retries=0) as c:
                        if c.status(i)["ready"]:
                            pending.discard(i)
                except (EdgeKVError, OSError):
                    pass
            if pending and time.monotonic() > deadline:
                self.stop()
                raise BootstrapTimeout(f"nodes {sorted(pending)} not ready after {timeout}s")
            if pending:
                time.sleep(0.05)

    def client(self, **kwargs) -> Client:
        live = [s for i, s in zip(self.ids, self.seeds) if self.alive(i)]
        c = Client(live, **kwargs)
        self._clients.append(c)
        return c

    def alive(self, node_id: int) -> bool:
        if self.mode == "thread":
            node = self.nodes.get(node_id)
            return node is not None and not node._stop.is_set()
        proc = self.procs.get(node_id)
        return proc is not None and proc.poll() is None

    def kill(self, node_id: int) -> None:
        """Crash one node: SIGKILL in process mode, abrupt stop in thread mode."""
        if self.mode == "process":
            proc = self.procs[node_id]
            proc.send_signal(signal.SIGKILL)
            proc.wait()
        else:
            self.nodes[node_id].stop()

    def stop(self) -> None:
        for c in self._clients:
            c.close()
        self._clients = []
        for node in self.nodes.values():
            node.stop()
        self.nodes = {}
        for proc in self.procs.values():
            if proc.poll() is None:
                proc.terminate()
        for proc in self.procs.values():
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        self.procs = {}

    def close(self) -> None:
        self.stop()
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None

    def __enter__(self) -> "LocalCluster":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()
