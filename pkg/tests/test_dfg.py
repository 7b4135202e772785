import json
from types import SimpleNamespace

import pytest

from edgekv.core import PoolDescriptor, PoolRegistry
from edgekv.dfg import LambdaContext, LambdaRegistry, Vertex, Edge, instantiate, load_dfg
from edgekv.errors import (
    DuplicateRegistration,
    MalformedKey,
    NoOutEdges,
    SchemaError,
    UnknownLambda,
    UnknownPool,
)
from edgekv.fastpath import Dispatcher, DispatchPolicy

POOLS = PoolRegistry(
    [
        PoolDescriptor("/a"),
        PoolDescriptor("/b"),
        PoolDescriptor("/c", "persistent"),
    ]
)


def graph(**over):
    d = {
        "pools": ["/a", "/b"],
        "vertices": [
            {"id": "x", "lambda": "relay", "pool": "/a", "policy": "fifo_by_key"},
            {"id": "y", "lambda": "noop", "pool": "/b"},
        ],
        "edges": [{"from": "x", "to": "/b"}],
    }
    d.update(over)
    return d


def test_load_valid_graph_and_defaults():
    dfg = load_dfg(json.dumps(graph()), POOLS, LambdaRegistry())
    x = dfg.vertex("x")
    assert x.policy is DispatchPolicy.FIFO_BY_KEY
    assert dfg.vertex("y").policy is DispatchPolicy.ROUND_ROBIN
    assert x.edges == (Edge("x", "/b", "trigger"),)
    assert load_dfg(dfg.dumps(), POOLS) == dfg


@pytest.mark.parametrize(
    "over, exc, needle",
    [
        ({"extra": 1}, SchemaError, "unknown top-level"),
        ({"vertices": [{"id": "x", "pool": "/a"}]}, SchemaError, "missing field 'lambda'"),
        ({"vertices": [{"id": 3, "lambda": "noop", "pool": "/a"}]}, SchemaError, "expected str"),
        ({"vertices": [{"id": "x", "lambda": "noop", "pool": "/a", "policy": "lifo"}]}, SchemaError, "policy"),
        ({"vertices": [{"id": "x", "lambda": "noop", "pool": "/zz"}], "edges": []}, UnknownPool, "/zz"),
        ({"vertices": [{"id": "x", "lambda": "nope", "pool": "/a"}], "edges": []}, UnknownLambda, "nope"),
        ({"edges": [{"from": "x", "to": "/a"}]}, SchemaError, "self-loop"),
        ({"edges": [{"from": "q", "to": "/b"}]}, SchemaError, "unknown vertex"),
        ({"edges": [{"from": "x", "to": "/c", "put_type": "volatile"}]}, SchemaError, "persistent pool"),
        ({"edges": [{"from": "x", "to": "/b", "put_type": "maybe"}]}, SchemaError, "put_type"),
        ({"vertices": [{"id": "x", "lambda": "noop", "pool": "a"}]}, SchemaError, "vertices"),
    ],
)
def test_rejects_bad_graphs(over, exc, needle):
    with pytest.raises(exc, match=needle):
        load_dfg(graph(**over), POOLS, LambdaRegistry())


def test_persistent_edge_into_persistent_pool_is_fine():
    dfg = load_dfg(graph(edges=[{"from": "x", "to": "/c/sub", "put_type": "persistent"}]), POOLS)
    assert dfg.vertex("x").edges[0].to == "/c/sub"


def test_not_json():
    with pytest.raises(SchemaError, match="not valid JSON"):
        load_dfg(b"{", POOLS)


def test_lambda_registry():
    reg = LambdaRegistry()
    assert {"noop", "relay", "notify", "cms"} <= set(reg.names())
    fn = reg.register("mine")(lambda ctx, obj: None)
    assert reg["mine"] is fn
    reg.add("mine", fn)
    with pytest.raises(DuplicateRegistration):
        reg.add("mine", lambda ctx, obj: None)
    with pytest.raises(UnknownLambda):
        reg["absent"]


class FakeNode:
    def __init__(self, hosted):
        self.registry = POOLS
        self.dispatcher = Dispatcher(2, start=False)
        self.hosted = hosted
        self.calls = []

    def hosts_pool(self, path):
        return path in self.hosted

    def put(self, key, payload):
        self.calls.append(("put", key, payload))

    def trigger_put(self, key, payload):
        self.calls.append(("trigger", key, payload))


def test_instantiate_only_on_hosting_nodes():
    dfg = load_dfg(graph(), POOLS)
    n = FakeNode({"/a"})
    regs = instantiate(n, dfg, LambdaRegistry())
    assert [r.vertex_id for r in regs] == ["x"]
    assert [r.lambda_id for r in n.dispatcher.match("/a/k")] == ["relay"]
    assert n.dispatcher.match("/b/k") == []


def test_emit_follows_every_edge_with_its_put_type():
    v = Vertex("x", "relay", "/a", edges=(Edge("x", "/b", "trigger"), Edge("x", "/c", "persistent")))
    n = FakeNode(set())
    ctx = LambdaContext(n, v)
    ctx.emit(b"p", "k/1")
    assert n.calls == [("trigger", "/b/k/1", b"p"), ("put", "/c/k/1", b"p")]


def test_emit_errors():
    n = FakeNode(set())
    with pytest.raises(NoOutEdges):
        LambdaContext(n, Vertex("y", "noop", "/b")).emit(b"", "k")
    with pytest.raises(MalformedKey):
        LambdaContext(n, Vertex("x", "relay", "/a", edges=(Edge("x", "/b"),))).emit(b"", "")


def test_relay_builtin_keeps_suffix():
    v = Vertex("x", "relay", "/a", edges=(Edge("x", "/b"),))
    n = FakeNode(set())
    obj = SimpleNamespace(key=POOLS.parse_key("/a/deep/key"), payload=b"z")
    LambdaRegistry()["relay"](LambdaContext(n, v), obj)
    assert n.calls == [("trigger", "/b/deep/key", b"z")]
