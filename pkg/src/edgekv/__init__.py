"""Sharded, versioned object store with a lambda fast path, temporal log, data-flow graphs and pub/sub."""

from .client import Client
from .config import ServiceConfig, load_config
from .core import ObjectKey, Persistence, PoolDescriptor, ShardingPolicy, Version
from .errors import EdgeKVError

__all__ = [
    "Client",
    "EdgeKVError",
    "ObjectKey",
    "Persistence",
    "PoolDescriptor",
    "ServiceConfig",
    "ShardingPolicy",
    "Version",
    "load_config",
]
