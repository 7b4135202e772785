import socket
import threading
import time
from types import SimpleNamespace

import pytest

from edgekv.cms import SubscriptionTable, topic_key
from edgekv.core import ObjectKey, Version
from edgekv.errors import InvalidArgument, QueueFull
from edgekv.wire import FrameReader, FrameType, FrameWriter


def test_topic_key():
    assert topic_key("news") == "/cms/topics/news"
    assert topic_key("/cms/topics") == "/cms/topics"
    for bad in ("", "a/b", "..", "."):
        with pytest.raises(InvalidArgument):
            topic_key(bad)


class SockConn:
    """The server side of a socketpair, as a subscriber connection."""

    def __init__(self, sock, gate=None):
        self.w = FrameWriter(sock)
        self.gate = gate

    def send(self, bufs):
        if self.gate is not None:
            self.gate.wait()
        self.w.send(bufs)


def obj(topic, seq, payload=b"x"):
    return SimpleNamespace(
        key=ObjectKey("/cms/topics", topic), payload=payload, version=Version(seq, seq + 1, 1000 + seq)
    )


def test_notify_reaches_exact_and_path_subscribers():
    a, b = socket.socketpair()
    table = SubscriptionTable()
    conn = SockConn(a)
    table.subscribe(conn, 7, "news")
    table.subscribe(conn, 8, "/cms/topics")
    table.subscribe(conn, 9, "other")
    assert table.notify(obj("news", 0, b"hello")) == 2
    reader = FrameReader(b)
    got = sorted(reader.read()[1] for _ in range(2))
    assert got == [7, 8]
    assert len(table) == 3
    a.close()
    b.close()


def test_order_preserved_per_subscriber():
    a, b = socket.socketpair()
    table = SubscriptionTable()
    table.subscribe(SockConn(a), 1, "t")
    for i in range(500):
        table.notify(obj("t", i, str(i).encode()))
    reader = FrameReader(b)
    seqs = []
    for _ in range(500):
        ftype, corr, msg, _ = reader.read()
        assert ftype is FrameType.NOTIFY and msg.topic == "t"
        seqs.append(msg.shard_seq)
    assert seqs == [i + 1 for i in range(500)]


def test_overflow_drops_the_slow_subscriber_with_an_error():
    a, b = socket.socketpair()
    gate = threading.Event()
    table = SubscriptionTable(bound=4)
    sub = table.subscribe(SockConn(a, gate), 5, "t")
    for i in range(20):
        table.notify(obj("t", i))
    assert sub.dropped and len(table) == 0
    gate.set()
    reader = FrameReader(b)
    deadline = time.monotonic() + 5
    frames = []
    while time.monotonic() < deadline:
        ftype, corr, msg, _ = reader.read()
        frames.append(ftype)
        if ftype is FrameType.ERROR:
            assert msg.code == QueueFull.code
            break
    assert frames[-1] is FrameType.ERROR


def test_drop_conn_removes_its_subscriptions():
    a, _ = socket.socketpair()
    table = SubscriptionTable()
    c1, c2 = SockConn(a), SockConn(a)
    table.subscribe(c1, 1, "t")
    table.subscribe(c2, 2, "t")
    table.drop_conn(c1)
    assert [s.corr for s in table.matching("/cms/topics/t")] == [2]
