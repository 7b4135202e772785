"""Service configuration: the JSON file every node starts from."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .core import PoolDescriptor, PoolRegistry
from .errors import ConfigError, PoolConfigError


@dataclass(frozen=True)
class NodeAddr:
    id: int
    host: str
    port: int


@dataclass(frozen=True)
class PoolSpec:
    """A pool plus the node ids hosting each of its shards."""

    pool: PoolDescriptor
    shards: tuple[tuple[int, ...], ...]


@dataclass
class ServiceConfig:
    node_id: int
    nodes: list[NodeAddr]
    pools: list[PoolSpec]
    dfg: str | None = None
    log_dir: str = "edgekv-data"
    workers: int | None = None
    queue_bound: int = 4096
    window: int = 3
    cache_bytes: int = 64 << 20
    heartbeat_interval_ms: int = 500
    failure_timeout_ms: int = 2000
    commit_timeout_ms: int = 10_000
    startup_timeout_ms: int = 10_000
    flush_bytes: int = 1 << 20
    flush_interval_us: int = 1000
    fsync: bool = True
    log_budget_bytes: int | None = None
    lambda_modules: list[str] = field(default_factory=list)

    @property
    def me(self) -> NodeAddr:
        return self.node(self.node_id)

    def node(self, node_id: int) -> NodeAddr:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise ConfigError(f"unknown node id {node_id}")

    def registry(self) -> PoolRegistry:
        return PoolRegistry(p.pool for p in self.pools)

    def for_node(self, node_id: int) -> "ServiceConfig":
        """The same cluster description as seen by another node."""
        d = self.to_dict()
        d["node_id"] = node_id
        return ServiceConfig.from_dict(d)

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "nodes": [{"id": n.id, "host": n.host, "port": n.port} for n in self.nodes],
            "pools": [dict(p.pool.to_dict(), shards=[list(s) for s in p.shards]) for p in self.pools],
            "dfg": self.dfg,
            "log_dir": self.log_dir,
            "workers": self.workers,
            "queue_bound": self.queue_bound,
            "window": self.window,
            "cache_bytes": self.cache_bytes,
            "heartbeat_interval_ms": self.heartbeat_interval_ms,
            "failure_timeout_ms": self.failure_timeout_ms,
            "commit_timeout_ms": self.commit_timeout_ms,
            "startup_timeout_ms": self.startup_timeout_ms,
            "flush_bytes": self.flush_bytes,
            "flush_interval_us": self.flush_interval_us,
            "fsync": self.fsync,
            "log_budget_bytes": self.log_budget_bytes,
            "lambda_modules": list(self.lambda_modules),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ServiceConfig":
        try:
            return _parse(d)
        except ConfigError:
            raise
        except PoolConfigError as exc:
            raise ConfigError(str(exc)) from None
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc!r}") from None


_SCALARS = {
    "log_dir": str,
    "workers": int,
    "queue_bound": int,
    "window": int,
    "cache_bytes": int,
    "heartbeat_interval_ms": int,
    "failure_timeout_ms": int,
    "commit_timeout_ms": int,
    "startup_timeout_ms": int,
    "flush_bytes": int,
    "flush_interval_us": int,
    "fsync": bool,
    "log_budget_bytes": int,
}


def default_assignment(node_ids: list[int], shard_count: int, rf: int) -> tuple[tuple[int, ...], ...]:
    """Shard s is hosted by rf consecutive nodes starting at position s (mod N)."""
    n = len(node_ids)
    return tuple(tuple(sorted(node_ids[(s + j) % n] for j in range(rf))) for s in range(shard_count))


def _parse(d: dict) -> ServiceConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    nodes = [NodeAddr(int(n["id"]), str(n.get("host", "127.0.0.1")), int(n["port"])) for n in d["nodes"]]
    if not nodes:
        raise ConfigError("config lists no nodes")
    ids = [n.id for n in nodes]
    dup = {i for i in ids if ids.count(i) > 1}
    if dup:
        raise ConfigError(f"duplicate node id(s): {sorted(dup)}")
    addrs = [(n.host, n.port) for n in nodes]
    if len(set(addrs)) != len(addrs):
        raise ConfigError("two nodes share a listen address")
    node_id = int(d["node_id"])
    if node_id not in ids:
        raise ConfigError(f"node_id {node_id} is not in the node list")

    registry = PoolRegistry()
    pools = []
    for raw in d.get("pools") or []:
        pool = PoolDescriptor.from_dict(raw)
        registry.add(pool)
        if pool.replication_factor > len(nodes):
            raise ConfigError(f"{pool.path}: replication_factor {pool.replication_factor} > {len(nodes)} nodes")
        if "shards" in raw and raw["shards"] is not None:
            shards = tuple(tuple(sorted(int(m) for m in s)) for s in raw["shards"])
            if len(shards) != pool.shard_count:
                raise ConfigError(f"{pool.path}: {len(shards)} shard assignments for shard_count {pool.shard_count}")
            for i, members in enumerate(shards):
                if len(members) != pool.replication_factor or len(set(members)) != len(members):
                    raise ConfigError(
                        f"{pool.path} shard {i}: needs {pool.replication_factor} distinct members, got {list(members)}"
                    )
                unknown = [m for m in members if m not in ids]
                if unknown:
                    raise ConfigError(f"{pool.path} shard {i}: unknown node(s) {unknown}")
        else:
            shards = default_assignment(sorted(ids), pool.shard_count, pool.replication_factor)
        pools.append(PoolSpec(pool, shards))

    kwargs = {}
    for name, conv in _SCALARS.items():
        if d.get(name) is not None:
            kwargs[name] = conv(d[name])
    if kwargs.get("window", 3) < 1:
        raise ConfigError("window must be >= 1")
    mods = d.get("lambda_modules") or []
    if not isinstance(mods, list):
        raise ConfigError("lambda_modules must be a list of module names")
    return ServiceConfig(node_id=node_id, nodes=nodes, pools=pools, dfg=d.get("dfg"), lambda_modules=list(mods), **kwargs)


def load_config(path: str | os.PathLike) -> ServiceConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from None
    cfg = ServiceConfig.from_dict(data)
    # relative paths in the file are relative to the file itself
    base = Path(path).resolve().parent
    if cfg.dfg and not os.path.isabs(cfg.dfg):
        cfg.dfg = str(base / cfg.dfg)
    if not os.path.isabs(cfg.log_dir):
        cfg.log_dir = str(base / cfg.log_dir)
    return cfg
