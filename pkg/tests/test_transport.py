import socket
import threading

import pytest

from edgekv.errors import CommitTimeout, KeyNotFound, NodeUnreachable, Timeout
from edgekv.transport import Conn, unwrap
from edgekv.wire import FrameType


def pair(handler=None):
    a, b = socket.socketpair()
    server = Conn(a, handler, name="server").start()
    client = Conn(b, name="client").start()
    return server, client


def echo_handler(conn, ftype, corr, msg):
    if ftype is FrameType.GET:
        if msg.key == "/missing/k":
            conn.send_frame(FrameType.ERROR, corr, KeyNotFound.code, "/missing/k")
        elif msg.key == "/slow/k":
            conn.send_frame(FrameType.ERROR, corr, CommitTimeout.code, "seq 4 not committed; lagging=[2, 3]")
        else:
            conn.send_frame(FrameType.OBJECT, corr, 0, 1, 2, -1, 3, msg.key, msg.key.encode())


def test_requests_are_matched_by_correlation_id():
    server, client = pair(echo_handler)
    futs = [client.request(FrameType.GET, f"/p/k{i}") for i in range(50)]
    for i, fut in enumerate(futs):
        ftype, msg = unwrap(fut, 5)
        assert ftype is FrameType.OBJECT and bytes(msg.payload) == f"/p/k{i}".encode()
    client.close()
    server.close()


def test_error_frames_become_exceptions():
    server, client = pair(echo_handler)
    with pytest.raises(KeyNotFound):
        unwrap(client.request(FrameType.GET, "/missing/k"), 5)
    with pytest.raises(CommitTimeout) as info:
        unwrap(client.request(FrameType.GET, "/slow/k"), 5)
    assert info.value.lagging == (2, 3)
    client.close()
    server.close()


def test_close_fails_pending_and_notifies_streams():
    server, client = pair(lambda *a: None)
    fut = client.request(FrameType.GET, "/p/k")
    seen = []
    client.open_stream(FrameType.SUBSCRIBE, lambda ft, msg: seen.append(ft), "t")
    closed = threading.Event()
    client.on_close = lambda c: closed.set()
    server.close()
    with pytest.raises(NodeUnreachable):
        unwrap(fut, 5)
    assert closed.wait(5)
    assert seen == [None]
    with pytest.raises(NodeUnreachable):
        client.send_frame(FrameType.STATUS, 1)


def test_unwrap_timeout():
    server, client = pair(lambda *a: None)
    with pytest.raises(Timeout):
        unwrap(client.request(FrameType.STATUS), 0.05)
    client.close()
    server.close()


def test_stream_receives_frames_after_first_response():
    got = []
    done = threading.Event()

    def handler(conn, ftype, corr, msg):
        conn.send_frame(FrameType.ACK, corr, 1)
        for i in range(3):
            conn.send_frame(FrameType.NOTIFY, corr, i, i, i, "t", b"x")

    server, client = pair(handler)

    def on_frame(ft, msg):
        got.append(ft)
        if len(got) == 3:
            done.set()

    fut = client.open_stream(FrameType.SUBSCRIBE, on_frame, "t")
    assert unwrap(fut, 5)[0] is FrameType.ACK
    assert done.wait(5)
    assert got == [FrameType.NOTIFY] * 3
    client.close()
    server.close()
