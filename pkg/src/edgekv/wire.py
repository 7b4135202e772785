"""Binary framing shared by node-to-node and client-to-node links.

Every frame is::

    u32 length    bytes that follow this field (13 - 4 + body)
    u8  type
    u64 corr_id
    body          per-type field list, little-endian

Body fields are fixed-width integers, ``str`` (u16 byte length + UTF-8),
``bytes`` (u32 length + raw) or small lists (u16 count + items). A ``bytes``
field is always the last one, so senders can hand the payload to
``sendmsg`` as its own buffer and receivers get it as a slice of the single
receive buffer. docs/wire.md lists every layout.
"""

from __future__ import annotations

import enum
import socket
import struct
import threading
from collections import namedtuple
from typing import Iterable, Sequence

from .errors import InternalError

LEN = struct.Struct("<I")
HEAD = struct.Struct("<IBQ")
HEAD_SIZE = HEAD.size  # 13
MAX_FRAME = 1 << 30


class FrameType(enum.IntEnum):
    # peer links
    MCAST = 0x01
    MCAST_ACK = 0x02
    PERSIST_ACK = 0x03
    TRIG = 0x04
    GAP_REQ = 0x05
    HEARTBEAT = 0x06
    # client requests
    PUT = 0x10
    TRIG_PUT = 0x11
    GET = 0x12
    GET_BY_VERSION = 0x13
    GET_BY_TIME = 0x14
    GET_RANGE = 0x15
    SUBSCRIBE = 0x16
    PUBLISH = 0x17
    NOTIFY = 0x18
    STATUS = 0x19
    # responses
    ACK = 0x20
    ERROR = 0x21
    VERSION = 0x22
    OBJECT = 0x23
    OBJECTS = 0x24
    JSON = 0x25


# field kinds: struct codes for scalars, "s" str, "b" trailing bytes,
# "I*" list of u32, "IQQ*" list of (u32, u64, u64), "O*" list of objects
_OBJECT_FIELDS = [
    ("pkv", "Q"), ("seq", "Q"), ("ts", "Q"), ("prev", "q"), ("checksum", "Q"), ("key", "s"), ("payload", "b"),
]
_TIMING = [("seq_recv_ns", "Q"), ("delivered_ns", "Q"), ("applied_ns", "Q"), ("persisted_ns", "Q"), ("reply_ns", "Q")]

SCHEMAS: dict[FrameType, list[tuple[str, str]]] = {
    FrameType.MCAST: [
        ("shard", "I"), ("seq", "Q"), ("ts", "Q"), ("view_id", "I"), ("origin", "I"), ("origin_corr", "Q"),
        ("seq_recv_ns", "Q"), ("key", "s"), ("payload", "b"),
    ],
    FrameType.MCAST_ACK: [("shard", "I"), ("seq", "Q"), ("node_id", "I"), ("apply_start_ns", "Q"), ("apply_end_ns", "Q")],
    FrameType.PERSIST_ACK: [("shard", "I"), ("node_id", "I"), ("durable_seq", "Q"), ("durable_ns", "Q")],
    FrameType.TRIG: [("origin", "I"), ("client_send_ns", "Q"), ("key", "s"), ("payload", "b")],
    FrameType.GAP_REQ: [("shard", "I"), ("node_id", "I"), ("from_seq", "Q"), ("to_seq", "Q")],
    FrameType.HEARTBEAT: [("node_id", "I"), ("view_id", "I"), ("dead", "I*"), ("shards", "IQQ*")],
    FrameType.PUT: [("client_send_ns", "Q"), ("key", "s"), ("payload", "b")],
    FrameType.TRIG_PUT: [("client_send_ns", "Q"), ("key", "s"), ("payload", "b")],
    FrameType.GET: [("key", "s")],
    FrameType.GET_BY_VERSION: [("version", "Q"), ("key", "s")],
    FrameType.GET_BY_TIME: [("t_us", "q"), ("timeout_ms", "I"), ("key", "s")],
    FrameType.GET_RANGE: [("lo", "Q"), ("hi", "Q"), ("key", "s")],
    FrameType.SUBSCRIBE: [("topic", "s")],
    FrameType.PUBLISH: [("persistence", "B"), ("client_send_ns", "Q"), ("topic", "s"), ("payload", "b")],
    FrameType.NOTIFY: [("seq", "Q"), ("shard_seq", "Q"), ("ts", "Q"), ("topic", "s"), ("payload", "b")],
    FrameType.STATUS: [],
    FrameType.ACK: [("node_id", "I")],
    FrameType.ERROR: [("code", "H"), ("message", "s")],
    FrameType.VERSION: [("pkv", "Q"), ("seq", "Q"), ("ts", "Q"), ("node_id", "I")] + _TIMING,
    FrameType.OBJECT: _OBJECT_FIELDS,
    FrameType.OBJECTS: [("objects", "O*")],
    FrameType.JSON: [("data", "b")],
}

ObjectRecord = namedtuple("ObjectRecord", [n for n, _ in _OBJECT_FIELDS])
MESSAGES = {t: namedtuple(t.name.title().replace("_", ""), [n for n, _ in s]) for t, s in SCHEMAS.items()}

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_ACKITEM = struct.Struct("<IQQ")


def _check_layout() -> None:
    for t, fields in SCHEMAS.items():
        kinds = [k for _, k in fields]
        if "b" in kinds:
            assert kinds.index("b") == len(kinds) - 1, t


_check_layout()


def _encode_fields(fields: Sequence[tuple[str, str]], values, head: bytearray) -> object | None:
    """Append the body of one message to ``head``; return the trailing payload buffer, if any."""
    tail = None
    for (name, kind), value in zip(fields, values):
        if kind == "s":
            raw = value.encode("utf-8")
            head += _U16.pack(len(raw))
            head += raw
        elif kind == "b":
            n = memoryview(value).nbytes
            head += _U32.pack(n)
            tail = value
        elif kind == "I*":
            head += _U16.pack(len(value))
            for v in value:
                head += _U32.pack(v)
        elif kind == "IQQ*":
            head += _U16.pack(len(value))
            for item in value:
                head += _ACKITEM.pack(*item)
        elif kind == "O*":
            head += _U32.pack(len(value))
            for rec in value:
                payload = _encode_fields(_OBJECT_FIELDS, rec, head)
                head += payload
        else:
            head += struct.pack("<" + kind, value)
    return tail


def encode(ftype: FrameType, corr_id: int, *values, **named) -> list:
    """Build a frame as a list of buffers ready for ``sendmsg``.

    Positional values follow the schema order; keywords fill the rest.
    The payload (if any) is the second buffer and is never copied.
    """
    fields = SCHEMAS[ftype]
    if named:
        values = list(values) + [named[n] for n, _ in fields[len(values) :]]
    if len(values) != len(fields):
        raise TypeError(f"{ftype.name} expects {len(fields)} fields, got {len(values)}")
    head = bytearray(HEAD_SIZE)
    tail = _encode_fields(fields, values, head)
    total = len(head) + (memoryview(tail).nbytes if tail is not None else 0)
    if total - 4 > MAX_FRAME:
        raise InternalError(f"frame too large: {total} bytes")
    HEAD.pack_into(head, 0, total - 4, ftype, corr_id)
    return [head] if tail is None else [head, tail]


def encode_bytes(ftype: FrameType, corr_id: int, *values, **named) -> bytes:
    return b"".join(bytes(b) for b in encode(ftype, corr_id, *values, **named))


def _decode_fields(fields, view: memoryview, pos: int, end: int):
    out = []
    for name, kind in fields:
        if kind == "s":
            (n,) = _U16.unpack_from(view, pos)
            pos += 2
            out.append(str(view[pos : pos + n], "utf-8"))
            pos += n
        elif kind == "b":
            (n,) = _U32.unpack_from(view, pos)
            pos += 4
            out.append(view[pos : pos + n])
            pos += n
        elif kind == "I*":
            (n,) = _U16.unpack_from(view, pos)
            pos += 2
            out.append(tuple(_U32.unpack_from(view, pos + 4 * i)[0] for i in range(n)))
            pos += 4 * n
        elif kind == "IQQ*":
            (n,) = _U16.unpack_from(view, pos)
            pos += 2
            out.append(tuple(_ACKITEM.unpack_from(view, pos + _ACKITEM.size * i) for i in range(n)))
            pos += _ACKITEM.size * n
        elif kind == "O*":
            (n,) = _U32.unpack_from(view, pos)
            pos += 4
            recs = []
            for _ in range(n):
                vals, pos = _decode_fields(_OBJECT_FIELDS, view, pos, end)
                recs.append(ObjectRecord(*vals))
            out.append(recs)
        else:
            st = struct.Struct("<" + kind)
            out.append(st.unpack_from(view, pos)[0])
            pos += st.size
        if pos > end:
            raise InternalError("truncated frame body")
    return out, pos


def decode_body(ftype: int, body: memoryview):
    """Decode a frame body (everything after corr_id) into the type's namedtuple."""
    ftype = FrameType(ftype)
    values, pos = _decode_fields(SCHEMAS[ftype], body, 0, len(body))
    if pos != len(body):
        raise InternalError(f"{ftype.name}: {len(body) - pos} trailing bytes")
    return MESSAGES[ftype](*values)


def decode(frame) -> tuple[FrameType, int, object]:
    """Decode a complete frame (length field included)."""
    view = memoryview(frame)
    length, ftype, corr = HEAD.unpack_from(view, 0)
    if length + 4 != len(view):
        raise InternalError(f"length field {length} does not match {len(view) - 4}")
    return FrameType(ftype), corr, decode_body(ftype, view[HEAD_SIZE:])


class AllocProbe:
    """Counts receive-buffer allocations; one per frame by construction."""

    def __init__(self) -> None:
        self.frames = 0
        self.bytes = 0

    def reset(self) -> None:
        self.frames = 0
        self.bytes = 0


RECV_PROBE = AllocProbe()


class ConnectionClosed(Exception):
    pass


def _recv_exact(sock: socket.socket, view: memoryview) -> None:
    got = 0
    n = len(view)
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise ConnectionClosed("peer closed connection")
        got += k


class FrameReader:
    """Reads whole frames from a blocking socket into one buffer each."""

    def __init__(self, sock: socket.socket, probe: AllocProbe = RECV_PROBE):
        self.sock = sock
        self.probe = probe
        self._lenbuf = bytearray(4)
        self._lenview = memoryview(self._lenbuf)

    def read(self) -> tuple[FrameType, int, object, int]:
        """Return (type, corr_id, message, frame_bytes)."""
        _recv_exact(self.sock, self._lenview)
        (length,) = LEN.unpack(self._lenbuf)
        if length < HEAD_SIZE - 4 or length > MAX_FRAME:
            raise ConnectionClosed(f"bad frame length {length}")
        buf = bytearray(length)
        self.probe.frames += 1
        self.probe.bytes += length
        view = memoryview(buf)
        _recv_exact(self.sock, view)
        ftype = view[0]
        (corr,) = struct.unpack_from("<Q", view, 1)
        return FrameType(ftype), corr, decode_body(ftype, view[9:]), length + 4


def send_buffers(sock: socket.socket, bufs: list) -> None:
    """Write all buffers with as few syscalls as possible."""
    views = [memoryview(b).cast("B") for b in bufs]
    while views:
        sent = sock.sendmsg(views)
        while sent:
            n = len(views[0])
            if sent >= n:
                sent -= n
                views.pop(0)
            else:
                views[0] = views[0][sent:]
                sent = 0
        while views and len(views[0]) == 0:
            views.pop(0)


class FrameWriter:
    """Serialises concurrent senders on one socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._lock = threading.Lock()
        self.closed = False

    def send(self, bufs: list) -> None:
        with self._lock:
            send_buffers(self.sock, bufs)

    def send_frame(self, ftype: FrameType, corr_id: int, *values, **named) -> None:
        self.send(encode(ftype, corr_id, *values, **named))


def iter_frames(data: bytes) -> Iterable[tuple[FrameType, int, object]]:
    """Split a byte string holding back-to-back frames (used by tests and tools)."""
    pos = 0
    view = memoryview(data)
    while pos < len(view):
        (length,) = LEN.unpack_from(view, pos)
        yield decode(view[pos : pos + 4 + length])
        pos += 4 + length
