"""Data-flow graphs: JSON loading, validation, lambda registry, and the lambda API.

Schema (see docs/dfg_schema.md)::

    {
      "pools":    ["/s1", "/s2"],
      "vertices": [{"id": "a", "lambda": "relay", "pool": "/s1", "policy": "round_robin"}],
      "edges":    [{"from": "a", "to": "/s2", "put_type": "trigger"}]
    }
"""

from __future__ import annotations

import importlib
import json
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

from .core import Persistence, PoolRegistry, split_path
from .errors import (
    DuplicateRegistration,
    MalformedKey,
    NoOutEdges,
    SchemaError,
    UnknownLambda,
    UnknownPool,
)
from .fastpath import DispatchPolicy, LambdaRegistration

if TYPE_CHECKING:
    from .node import Node

PUT_TYPES = ("trigger", "volatile", "persistent")

LambdaFn = Callable[["LambdaContext", object], None]


@dataclass(frozen=True)
class Edge:
    src: str
    to: str
    put_type: str = "trigger"


@dataclass(frozen=True)
class Vertex:
    id: str
    lambda_id: str
    pool: str
    policy: DispatchPolicy = DispatchPolicy.ROUND_ROBIN
    edges: tuple[Edge, ...] = ()


@dataclass(frozen=True)
class DfgDescriptor:
    pools: tuple[str, ...] = ()
    vertices: tuple[Vertex, ...] = ()

    @property
    def edges(self) -> tuple[Edge, ...]:
        return tuple(e for v in self.vertices for e in v.edges)

    def vertex(self, vid: str) -> Vertex:
        for v in self.vertices:
            if v.id == vid:
                return v
        raise KeyError(vid)

    def to_dict(self) -> dict:
        return {
            "pools": list(self.pools),
            "vertices": [
                {"id": v.id, "lambda": v.lambda_id, "pool": v.pool, "policy": v.policy.value} for v in self.vertices
            ],
            "edges": [{"from": e.src, "to": e.to, "put_type": e.put_type} for e in self.edges],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


class LambdaRegistry:
    """Process-local map from lambda id to callable ``fn(ctx, obj)``."""

    def __init__(self, builtins: bool = True):
        self._fns: dict[str, LambdaFn] = {}
        if builtins:
            for name, fn in BUILTINS.items():
                self._fns[name] = fn

    def add(self, name: str, fn: LambdaFn) -> None:
        if name in self._fns and self._fns[name] is not fn:
            raise DuplicateRegistration(f"lambda {name!r} already defined")
        self._fns[name] = fn

    def register(self, name: str):
        def deco(fn: LambdaFn) -> LambdaFn:
            self.add(name, fn)
            return fn

        return deco

    def __contains__(self, name: str) -> bool:
        return name in self._fns

    def __getitem__(self, name: str) -> LambdaFn:
        try:
            return self._fns[name]
        except KeyError:
            raise UnknownLambda(f"no lambda named {name!r}") from None

    def names(self) -> list[str]:
        return sorted(self._fns)

    def load_module(self, module: str) -> None:
        """Import ``module``; it may use the ``register`` decorator below or expose a ``LAMBDAS`` dict."""
        mod = importlib.import_module(module)
        for name, fn in getattr(mod, "LAMBDAS", {}).items():
            self.add(name, fn)
        for name, fn in _module_registered.items():
            self.add(name, fn)


_module_registered: dict[str, LambdaFn] = {}


def register(name: str):
    """Decorator for user lambda modules listed in the config's ``lambda_modules``."""

    def deco(fn: LambdaFn) -> LambdaFn:
        _module_registered[name] = fn
        return fn

    return deco


class LambdaContext:
    """What a lambda sees during one upcall."""

    __slots__ = ("node", "vertex")

    def __init__(self, node: "Node", vertex: Vertex | None):
        self.node = node
        self.vertex = vertex

    def get_current(self, key: str):
        return self.node.get(key)

    def get_by_version(self, key: str, version: int):
        return self.node.get_by_version(key, version)

    def get_by_time(self, key: str, t_us: int):
        return self.node.get_by_time(key, t_us)

    def put(self, key: str, payload):
        return self.node.put(key, payload)

    def trigger_put(self, key: str, payload) -> None:
        self.node.trigger_put(key, payload)

    def emit(self, payload, suffix: str) -> None:
        """Send ``payload`` down every out-edge as ``<edge prefix>/<suffix>``."""
        if self.vertex is None or not self.vertex.edges:
            raise NoOutEdges(f"vertex {self.vertex.id if self.vertex else '?'} has no out-edges")
        if not suffix:
            raise MalformedKey("empty key suffix")
        for edge in self.vertex.edges:
            key = f"{edge.to}/{suffix}"
            if edge.put_type == "trigger":
                self.node.trigger_put(key, payload)
            else:
                self.node.put(key, payload)


def noop_lambda(ctx: LambdaContext, obj) -> None:
    pass


def relay_lambda(ctx: LambdaContext, obj) -> None:
    ctx.emit(obj.payload, obj.key.suffix)


def notify_lambda(ctx: LambdaContext, obj) -> None:
    ctx.node.subs.notify(obj)


def _cms(ctx, obj):
    from .cms import cms_lambda

    cms_lambda(ctx, obj)


BUILTINS: dict[str, LambdaFn] = {
    "noop": noop_lambda,
    "relay": relay_lambda,
    "notify": notify_lambda,
    "cms": _cms,
}


# -- loading ---------------------------------------------------------------


def _field(obj: dict, name: str, where: str, kind=str, required: bool = True, default=None):
    if name not in obj:
        if required:
            raise SchemaError(f"{where}: missing field {name!r}")
        return default
    val = obj[name]
    if not isinstance(val, kind):
        raise SchemaError(f"{where}.{name}: expected {kind.__name__}, got {type(val).__name__}")
    return val


def load_dfg(data, pools: PoolRegistry | None = None, lambdas: LambdaRegistry | None = None) -> DfgDescriptor:
    """Parse and validate a DFG description (bytes, str, or already-decoded dict)."""
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    if isinstance(data, str):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise SchemaError("top level must be an object")
    unknown = set(data) - {"pools", "vertices", "edges"}
    if unknown:
        raise SchemaError(f"unknown top-level field(s): {sorted(unknown)}")
    pool_list = _field(data, "pools", "dfg", list, required=False, default=[])
    raw_vertices = _field(data, "vertices", "dfg", list, required=False, default=[])
    raw_edges = _field(data, "edges", "dfg", list, required=False, default=[])

    for i, p in enumerate(pool_list):
        if not isinstance(p, str):
            raise SchemaError(f"pools[{i}]: expected str")
        _check_pool(p, pools, f"pools[{i}]")

    vertices: dict[str, dict] = {}
    order = []
    for i, rv in enumerate(raw_vertices):
        where = f"vertices[{i}]"
        if not isinstance(rv, dict):
            raise SchemaError(f"{where}: expected object")
        extra = set(rv) - {"id", "lambda", "pool", "policy"}
        if extra:
            raise SchemaError(f"{where}: unknown field(s) {sorted(extra)}")
        vid = _field(rv, "id", where)
        if vid in vertices:
            raise SchemaError(f"{where}.id: duplicate vertex id {vid!r}")
        lam = _field(rv, "lambda", where)
        prefix = _field(rv, "pool", where)
        policy = _field(rv, "policy", where, required=False, default="round_robin")
        try:
            policy = DispatchPolicy(policy)
        except ValueError:
            raise SchemaError(f"{where}.policy: must be one of {[p.value for p in DispatchPolicy]}") from None
        _check_pool(prefix, pools, f"{where}.pool")
        if lambdas is not None and lam not in lambdas:
            raise UnknownLambda(f"{where}.lambda: no lambda named {lam!r}")
        vertices[vid] = dict(id=vid, lambda_id=lam, pool=prefix, policy=policy, edges=[])
        order.append(vid)

    for i, re_ in enumerate(raw_edges):
        where = f"edges[{i}]"
        if not isinstance(re_, dict):
            raise SchemaError(f"{where}: expected object")
        extra = set(re_) - {"from", "to", "put_type"}
        if extra:
            raise SchemaError(f"{where}: unknown field(s) {sorted(extra)}")
        src = _field(re_, "from", where)
        to = _field(re_, "to", where)
        put_type = _field(re_, "put_type", where, required=False, default="trigger")
        if src not in vertices:
            raise SchemaError(f"{where}.from: unknown vertex {src!r}")
        if put_type not in PUT_TYPES:
            raise SchemaError(f"{where}.put_type: must be one of {list(PUT_TYPES)}")
        pool = _check_pool(to, pools, f"{where}.to")
        if to == vertices[src]["pool"]:
            raise SchemaError(f"{where}: self-loop on {to}")
        if pool is not None and put_type != "trigger" and Persistence(put_type) is not pool.persistence:
            raise SchemaError(f"{where}.put_type: {put_type} edge into {pool.persistence.value} pool {pool.path}")
        vertices[src]["edges"].append(Edge(src, to, put_type))

    built = tuple(
        Vertex(v["id"], v["lambda_id"], v["pool"], v["policy"], tuple(v["edges"])) for v in (vertices[o] for o in order)
    )
    return DfgDescriptor(tuple(pool_list), built)


def _check_pool(prefix: str, pools: PoolRegistry | None, where: str):
    try:
        split_path(prefix)
    except MalformedKey as exc:
        raise SchemaError(f"{where}: {exc}") from None
    if pools is None:
        return None
    pool = pools.resolve_prefix(prefix)
    if pool is None:
        raise UnknownPool(f"{where}: {prefix} is not inside a registered pool")
    return pool


def instantiate(node: "Node", dfg: DfgDescriptor, lambdas: LambdaRegistry) -> list[LambdaRegistration]:
    """Register every vertex whose pool has a shard on ``node``."""
    regs = []
    for v in dfg.vertices:
        pool = node.registry.resolve_prefix(v.pool)
        if pool is None:
            raise UnknownPool(f"vertex {v.id}: {v.pool}")
        if not node.hosts_pool(pool.path):
            continue
        fn = lambdas[v.lambda_id]
        reg = LambdaRegistration(v.lambda_id, v.pool, v.policy, handler=_bind(node, v, fn), vertex_id=v.id)
        node.dispatcher.register(reg)
        regs.append(reg)
    return regs


def _bind(node: "Node", vertex: Vertex, fn: LambdaFn):
    def handler(obj):
        fn(LambdaContext(node, vertex), obj)

    return handler

