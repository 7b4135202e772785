"""Publish/subscribe on top of the store.

A topic T is the key ``/cms/topics/T``; publishing is an ordered put to it,
so the topic's home shard fixes one total order. The notification lambda is
registered FIFO-by-key, which keeps each topic on one worker queue while
different topics run in parallel. Subscribers are pushed NOTIFY frames over
their own client connection; nobody polls.
"""

from __future__ import annotations

import logging
import queue
import threading

from .core import Persistence, split_path
from .errors import InvalidArgument, QueueFull
from .wire import FrameType, encode

log = logging.getLogger(__name__)

TOPIC_POOL = "/cms/topics"
SUBSCRIBER_BUFFER = 4096


def topic_key(topic: str) -> str:
    """Full key for a topic name, or the path itself for path subscriptions."""
    if topic.startswith("/"):
        split_path(topic)
        return topic
    if not topic or "/" in topic or topic in (".", ".."):
        raise InvalidArgument(f"topic must be a single path component: {topic!r}")
    return f"{TOPIC_POOL}/{topic}"


def persistence_code(p: Persistence | str) -> int:
    return 1 if Persistence(p) is Persistence.PERSISTENT else 0


class Subscriber:
    """One (connection, subscription) pair with a bounded send buffer."""

    def __init__(self, conn, corr: int, topic: str, path: str, bound: int, on_drop):
        self.conn = conn
        self.corr = corr
        self.topic = topic
        self.path = path
        self.sent = 0
        self._q: queue.Queue = queue.Queue(maxsize=bound)
        self._on_drop = on_drop
        self.dropped = False
        self._error: Exception | None = None
        self._thread = threading.Thread(target=self._pump, name=f"sub-{corr}", daemon=True)
        self._thread.start()

    def offer(self, obj) -> None:
        v = obj.version
        bufs = encode(
            FrameType.NOTIFY, self.corr, v.per_key_version if v else 0, v.shard_seq if v else 0,
            v.timestamp_us if v else 0, self.topic, obj.payload,
        )
        try:
            self._q.put_nowait(bufs)
        except queue.Full:
            self.drop(QueueFull(f"subscriber buffer for {self.topic} overflowed"))

    def _pump(self) -> None:
        while True:
            bufs = self._q.get()
            if self.dropped:
                break
            try:
                self.conn.send(bufs)
                self.sent += 1
            except Exception as exc:
                self.drop(exc)
                break
        # queued frames are discarded; the error, if any, goes out last
        if self._error is not None:
            try:
                self.conn.send(encode(FrameType.ERROR, self.corr, self._error.code, str(self._error)))
            except Exception:
                pass

    def drop(self, exc: Exception | None = None) -> None:
        """Stop delivering; never blocks the caller, which may be a lambda worker."""
        if self.dropped:
            return
        if exc is not None and hasattr(exc, "code"):
            self._error = exc
        self.dropped = True
        self._on_drop(self)
        try:
            self._q.put_nowait(None)
        except queue.Full:
            pass


class SubscriptionTable:
    """Subscribers by path; a key notifies every subscription on one of its path-prefixes."""

    def __init__(self, bound: int = SUBSCRIBER_BUFFER):
        self.bound = bound
        self._by_path: dict[str, tuple[Subscriber, ...]] = {}
        self._lock = threading.Lock()
        self.notified = 0

    def subscribe(self, conn, corr: int, topic: str) -> Subscriber:
        path = topic_key(topic)
        sub = Subscriber(conn, corr, topic, path, self.bound, self._remove)
        with self._lock:
            self._by_path[path] = self._by_path.get(path, ()) + (sub,)
        return sub

    def _remove(self, sub: Subscriber) -> None:
        with self._lock:
            kept = tuple(s for s in self._by_path.get(sub.path, ()) if s is not sub)
            if kept:
                self._by_path[sub.path] = kept
            else:
                self._by_path.pop(sub.path, None)

    def drop_conn(self, conn) -> None:
        with self._lock:
            subs = [s for group in self._by_path.values() for s in group if s.conn is conn]
        for s in subs:
            s.drop()

    def matching(self, full_key: str) -> list[Subscriber]:
        out: list[Subscriber] = []
        by_path = self._by_path
        if not by_path:
            return out
        parts = full_key[1:].split("/")
        for n in range(1, len(parts) + 1):
            group = by_path.get("/" + "/".join(parts[:n]))
            if group:
                out.extend(group)
        return out

    def notify(self, obj) -> int:
        subs = self.matching(obj.key.full)
        for s in subs:
            s.offer(obj)
        self.notified += len(subs)
        return len(subs)

    def __len__(self) -> int:
        return sum(len(g) for g in self._by_path.values())


def cms_lambda(ctx, obj) -> None:
    """Push the published object to every subscriber of its topic."""
    ctx.node.subs.notify(obj)
