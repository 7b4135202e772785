"""One TCP connection: a reader thread, a locked writer, and request futures.

Both clients and nodes use this. Responses are matched to requests by
correlation id; everything else goes to the owner's frame handler.
"""

from __future__ import annotations

import itertools
import logging
import socket
import threading
import time
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeout
from typing import Callable

from .errors import EdgeKVError, NodeUnreachable, Timeout, error_from_code
from .wire import ConnectionClosed, FrameReader, FrameType, FrameWriter, encode

log = logging.getLogger(__name__)

RESPONSE_TYPES = frozenset(
    {FrameType.ACK, FrameType.ERROR, FrameType.VERSION, FrameType.OBJECT, FrameType.OBJECTS, FrameType.JSON}
)

FrameHandler = Callable[["Conn", FrameType, int, object], None]


def connect(host: str, port: int, timeout: float = 5.0) -> socket.socket:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


class Conn:
    def __init__(
        self,
        sock: socket.socket,
        handler: FrameHandler | None = None,
        on_close: Callable[["Conn"], None] | None = None,
        name: str = "conn",
    ):
        self.sock = sock
        self.name = name
        self.handler = handler
        self.on_close = on_close
        self.peer_id: int | None = None
        self.last_heard = time.monotonic()
        self._reader = FrameReader(sock)
        self._writer = FrameWriter(sock)
        self._pending: dict[int, Future] = {}
        self._corr = itertools.count(1)
        self._lock = threading.Lock()
        self.streams: dict[int, Callable[[FrameType, object], None]] = {}
        self.closed = threading.Event()
        self._thread = threading.Thread(target=self._read_loop, name=f"{name}-rx", daemon=True)

    def start(self) -> "Conn":
        self._thread.start()
        return self

    # -- sending ------------------------------------------------------------

    def send(self, bufs: list) -> None:
        if self.closed.is_set():
            raise NodeUnreachable(f"{self.name}: connection closed")
        try:
            self._writer.send(bufs)
        except OSError as exc:
            self.close()
            raise NodeUnreachable(f"{self.name}: {exc}") from None

    def send_frame(self, ftype: FrameType, corr_id: int, *values, **named) -> None:
        self.send(encode(ftype, corr_id, *values, **named))

    def next_corr(self) -> int:
        return next(self._corr)

    def request(self, ftype: FrameType, *values, **named) -> Future:
        corr = next(self._corr)
        fut: Future = Future()
        with self._lock:
            if self.closed.is_set():
                fut.set_exception(NodeUnreachable(f"{self.name}: connection closed"))
                return fut
            self._pending[corr] = fut
        try:
            self.send(encode(ftype, corr, *values, **named))
        except EdgeKVError as exc:
            with self._lock:
                self._pending.pop(corr, None)
            if not fut.done():
                fut.set_exception(exc)
        return fut

    def open_stream(self, ftype: FrameType, on_frame: Callable[[FrameType, object], None], *values, **named) -> Future:
        """A request whose corr id keeps receiving frames after the first response."""
        corr = next(self._corr)
        self.streams[corr] = on_frame
        fut: Future = Future()
        fut.corr = corr
        with self._lock:
            self._pending[corr] = fut
        try:
            self.send(encode(ftype, corr, *values, **named))
        except EdgeKVError as exc:
            self.streams.pop(corr, None)
            with self._lock:
                self._pending.pop(corr, None)
            fut.set_exception(exc)
        return fut

    # -- receiving ----------------------------------------------------------

    def _read_loop(self) -> None:
        try:
            while True:
                ftype, corr, msg, _ = self._reader.read()
                self.last_heard = time.monotonic()
                if ftype in RESPONSE_TYPES:
                    with self._lock:
                        fut = self._pending.pop(corr, None)
                    if fut is not None:
                        fut.set_result((ftype, msg))
                        continue
                stream = self.streams.get(corr)
                if stream is not None:
                    stream(ftype, msg)
                    continue
                if self.handler is None:
                    log.debug("%s: unhandled %s", self.name, ftype.name)
                    continue
                try:
                    self.handler(self, ftype, corr, msg)
                except Exception:
                    log.exception("%s: handler failed on %s", self.name, ftype.name)
        except (ConnectionClosed, OSError):
            pass
        except Exception:
            log.exception("%s: reader crashed", self.name)
        finally:
            self.close()

    def close(self) -> None:
        with self._lock:
            if self.closed.is_set():
                return
            self.closed.set()
            pending, self._pending = self._pending, {}
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        for fut in pending.values():
            if not fut.done():
                fut.set_exception(NodeUnreachable(f"{self.name}: connection lost"))
        for cb in list(self.streams.values()):
            try:
                cb(None, None)
            except Exception:
                log.exception("%s: stream close callback failed", self.name)
        self.streams.clear()
        if self.on_close is not None:
            try:
                self.on_close(self)
            except Exception:
                log.exception("%s: on_close failed", self.name)


def unwrap(fut: Future, timeout: float | None = None):
    """Wait for a response; turn ERROR frames into exceptions."""
    try:
        ftype, msg = fut.result(timeout)
    except FutureTimeout:
        raise Timeout("no response in time") from None
    if ftype is FrameType.ERROR:
        raise error_from_code(msg.code, msg.message)
    return ftype, msg
