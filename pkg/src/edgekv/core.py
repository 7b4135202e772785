"""Keys, pools, versions and the deterministic key-to-shard mapping."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

from .errors import MalformedKey, NoSuchPool, PoolConfigError
from .kernels import fnv1a64


def stable_hash(data: bytes | str) -> int:
    """FNV-1a 64-bit digest; identical on every platform and run."""
    return fnv1a64(data)


class Persistence(str, enum.Enum):
    VOLATILE = "volatile"
    PERSISTENT = "persistent"


class ShardingPolicy(str, enum.Enum):
    HASH_FULL_KEY = "hash_full_key"
    HASH_FIRST_SUFFIX_COMPONENT = "hash_first_suffix_component"


def split_path(path: str) -> list[str]:
    """Components of an absolute path; raises MalformedKey on any violation."""
    if not path or path[0] != "/":
        raise MalformedKey(f"path must start with '/': {path!r}")
    parts = path[1:].split("/")
    for part in parts:
        if part == "" or part == "." or part == "..":
            raise MalformedKey(f"bad path component {part!r} in {path!r}")
    return parts


def validate_suffix(suffix: str) -> list[str]:
    if not suffix:
        raise MalformedKey("empty key suffix")
    return split_path("/" + suffix)


@dataclass(frozen=True, slots=True)
class ObjectKey:
    pool_path: str
    suffix: str

    @property
    def full(self) -> str:
        return self.pool_path + "/" + self.suffix

    @property
    def first_component(self) -> str:
        return self.suffix.split("/", 1)[0]

    def __str__(self) -> str:
        return self.full


@dataclass(frozen=True, slots=True)
class PoolDescriptor:
    path: str
    persistence: Persistence = Persistence.VOLATILE
    replication_factor: int = 1
    shard_count: int = 1
    sharding_policy: ShardingPolicy = ShardingPolicy.HASH_FULL_KEY

    def __post_init__(self) -> None:
        try:
            split_path(self.path)
        except MalformedKey as exc:
            raise PoolConfigError(str(exc)) from None
        if self.replication_factor < 1:
            raise PoolConfigError(f"{self.path}: replication_factor must be >= 1")
        if self.shard_count < 1:
            raise PoolConfigError(f"{self.path}: shard_count must be >= 1")
        # accept plain strings from config files
        object.__setattr__(self, "persistence", Persistence(self.persistence))
        object.__setattr__(self, "sharding_policy", ShardingPolicy(self.sharding_policy))

    @property
    def persistent(self) -> bool:
        return self.persistence is Persistence.PERSISTENT

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "persistence": self.persistence.value,
            "replication_factor": self.replication_factor,
            "shard_count": self.shard_count,
            "sharding_policy": self.sharding_policy.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PoolDescriptor":
        return cls(
            path=d["path"],
            persistence=d.get("persistence", "volatile"),
            replication_factor=int(d.get("replication_factor", 1)),
            shard_count=int(d.get("shard_count", 1)),
            sharding_policy=d.get("sharding_policy", "hash_full_key"),
        )


@dataclass(frozen=True, slots=True)
class Version:
    per_key_version: int
    shard_seq: int
    timestamp_us: int


def _is_path_prefix(a: list[str], b: list[str]) -> bool:
    return len(a) <= len(b) and b[: len(a)] == a


class PoolRegistry:
    """The set of registered pools. Pool paths may not nest."""

    def __init__(self, pools: Iterable[PoolDescriptor] = ()):
        self._pools: dict[str, PoolDescriptor] = {}
        for p in pools:
            self.add(p)

    def add(self, pool: PoolDescriptor) -> None:
        if pool.path in self._pools:
            raise PoolConfigError(f"duplicate pool path {pool.path}")
        mine = split_path(pool.path)
        for other in self._pools:
            theirs = split_path(other)
            if _is_path_prefix(mine, theirs) or _is_path_prefix(theirs, mine):
                raise PoolConfigError(f"pool {pool.path} nests with {other}")
        self._pools[pool.path] = pool

    def __contains__(self, path: str) -> bool:
        return path in self._pools

    def __getitem__(self, path: str) -> PoolDescriptor:
        return self._pools[path]

    def __iter__(self):
        return iter(self._pools.values())

    def __len__(self) -> int:
        return len(self._pools)

    def resolve_prefix(self, path: str) -> PoolDescriptor | None:
        """Pool whose path is the longest path-prefix of ``path`` (may equal it)."""
        parts = split_path(path)
        for n in range(len(parts), 0, -1):
            pool = self._pools.get("/" + "/".join(parts[:n]))
            if pool is not None:
                return pool
        return None

    def parse_key(self, raw: str) -> ObjectKey:
        return parse_key(raw, self)


def parse_key(raw: str, pools: PoolRegistry | Iterable[PoolDescriptor]) -> ObjectKey:
    if not isinstance(pools, PoolRegistry):
        pools = PoolRegistry(pools)
    if not len(pools):
        raise NoSuchPool("no pools registered")
    if not isinstance(raw, str) or not raw.startswith("/"):
        raise MalformedKey(f"key must start with '/': {raw!r}")
    # find the pool before full validation so "/unknown/x" reports NoSuchPool
    parts = raw[1:].split("/")
    for n in range(len(parts), 0, -1):
        path = "/" + "/".join(parts[:n])
        if path in pools:
            if n == len(parts):
                raise MalformedKey(f"key {raw!r} has an empty suffix")
            suffix = "/".join(parts[n:])
            validate_suffix(suffix)
            return ObjectKey(path, suffix)
    split_path(raw)
    raise NoSuchPool(f"no registered pool prefixes {raw!r}")


def compose_key(pool_path: str, suffix: str) -> str:
    return pool_path + "/" + suffix


def map_key_to_shard(key: ObjectKey, pool: PoolDescriptor) -> int:
    if pool.shard_count == 1:
        return 0
    if pool.sharding_policy is ShardingPolicy.HASH_FIRST_SUFFIX_COMPONENT:
        portion = key.first_component
    else:
        portion = key.suffix
    return stable_hash(portion) % pool.shard_count
