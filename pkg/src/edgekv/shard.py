"""In-memory store of one shard member.

Each key owns a ``SeqSlot``: a payload cell guarded by two counters. The
single delivery context writes with::

    v_a += 1; copy payload + metadata into the cell; v_b = v_a

and readers take ``b = v_b``, copy the cell, then accept the copy only if
``v_a == b``. Nothing on the read path takes a lock.
"""

from __future__ import annotations

import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Hashable

from .core import ObjectKey, PoolDescriptor, Version, stable_hash
from .errors import InvalidArgument, KeyNotFound, RetryExhausted, Timeout, VersionNotFound
from .kernels import SeqSlot
from .plog import NO_PREV, LogRecord, PersistentLog

RETRY_LIMIT = 1000
BACKOFF_START = 1e-6
BACKOFF_CAP = 1e-3


@dataclass(frozen=True, slots=True)
class VersionedObject:
    key: ObjectKey
    payload: bytes | memoryview
    version: Version
    prev: int | None  # log offset of the previous version; None at chain start or if unlogged
    payload_checksum: int


@dataclass(frozen=True, slots=True)
class _Meta:
    version: Version
    prev: int | None
    checksum: int


class KvShard:
    """Current-version table plus the get family for one shard member."""

    def __init__(
        self,
        pool: PoolDescriptor,
        log: PersistentLog | None = None,
        *,
        retry_limit: int = RETRY_LIMIT,
        slot_factory: Callable[[], object] = SeqSlot,
        durable_wait: float = 10.0,
    ):
        if pool.persistent and log is None:
            raise InvalidArgument(f"persistent pool {pool.path} needs a log")
        self.pool = pool
        self.log = log
        self.retry_limit = retry_limit
        self.durable_wait = durable_wait
        self._slot_factory = slot_factory
        self._slots: dict[str, object] = {}
        self._keys: dict[str, ObjectKey] = {}
        self._next_version: dict[str, int] = {}
        self.retries = 0
        if log is not None and log.recovered:
            self._restore(log)

    def _restore(self, log: PersistentLog) -> None:
        last: dict[str, object] = {}
        for rec in log.recovered:
            last[rec.key] = rec
        for full, rec in last.items():
            key = ObjectKey(self.pool.path, full[len(self.pool.path) + 1 :])
            obj = log.read_at(rec.offset)
            self._install(key, obj.payload, obj.version, None if obj.prev_offset == NO_PREV else obj.prev_offset)
            self._next_version[full] = obj.version.per_key_version + 1

    # -- writer side (ordered-delivery context only) -----------------------

    def apply_put(self, payload, key: ObjectKey, seq: int, ts: int) -> Version:
        return self.apply(payload, key, seq, ts).version

    def apply(self, payload, key: ObjectKey, seq: int, ts: int) -> VersionedObject:
        """apply_put, returning the installed record (payload by reference)."""
        full = key.full
        pkv = self._next_version.get(full, 0)
        version = Version(pkv, seq, ts)
        prev = None
        if self.log is not None:
            rec = LogRecord(full, payload, version)
            self.log.append(rec)
            prev = None if rec.prev_offset == NO_PREV else rec.prev_offset
        checksum = self._install(key, payload, version, prev)
        self._next_version[full] = pkv + 1
        return VersionedObject(key, payload, version, prev, checksum)

    def _install(self, key: ObjectKey, payload, version: Version, prev: int | None) -> int:
        full = key.full
        meta = _Meta(version, prev, stable_hash(payload))
        slot = self._slots.get(full)
        if slot is None:
            slot = self._slot_factory()
            self._keys[full] = key
            self._slots[full] = slot
        slot.begin_write()
        slot.fill(payload, meta)
        slot.end_write()
        return meta.checksum

    # -- reader side --------------------------------------------------------

    def get_current(self, key: ObjectKey) -> VersionedObject:
        slot = self._slots.get(key.full)
        if slot is None:
            raise KeyNotFound(key.full)
        delay = BACKOFF_START
        for _ in range(self.retry_limit):
            seen_b = slot.read_begin()
            meta, data = slot.copy_out()
            if slot.read_validate(seen_b):
                return VersionedObject(key, data, meta.version, meta.prev, meta.checksum)
            self.retries += 1
            time.sleep(delay)
            delay = min(delay * 2, BACKOFF_CAP)
        raise RetryExhausted(f"{key.full}: no consistent read after {self.retry_limit} attempts")

    def current_version(self, key: ObjectKey) -> int:
        n = self._next_version.get(key.full)
        if n is None:
            raise KeyNotFound(key.full)
        return n - 1

    def get_by_version(self, key: ObjectKey, v: int) -> VersionedObject:
        current = self.current_version(key)
        if v > current or v < 0:
            raise VersionNotFound(f"{key.full}: version {v} (current {current})")
        if v == current:
            obj = self.get_current(key)
            if obj.version.per_key_version == v:
                return obj
        if self.log is None:
            raise VersionNotFound(f"{key.full}: volatile pool keeps only version {current}")
        self._await_durable(key, v)
        return self._from_log(key, self.log.read_version(key.full, v))

    def get_range_by_version(self, key: ObjectKey, v_lo: int, v_hi: int) -> list[VersionedObject]:
        if v_lo > v_hi:
            raise InvalidArgument(f"empty range [{v_lo}, {v_hi}]")
        current = self.current_version(key)
        if v_hi > current or v_lo < 0:
            raise VersionNotFound(f"{key.full}: range [{v_lo}, {v_hi}] (current {current})")
        if self.log is None:
            if v_lo == v_hi == current:
                return [self.get_current(key)]
            raise VersionNotFound(f"{key.full}: volatile pool keeps only version {current}")
        self._await_durable(key, v_hi)
        return [self._from_log(key, rec) for rec in self.log.read_range(key.full, v_lo, v_hi)]

    def get_by_time(self, key: ObjectKey, t: int, timeout: float = 10.0) -> VersionedObject:
        if self.log is None:
            raise InvalidArgument(f"{self.pool.path} is volatile; temporal reads need a persistent pool")
        if key.full not in self._next_version:
            raise KeyNotFound(key.full)
        return self._from_log(key, self.log.get_by_time(key.full, t, timeout))

    def _await_durable(self, key: ObjectKey, v: int) -> None:
        deadline = time.monotonic() + self.durable_wait
        while self.log.durable_version_count(key.full) <= v:
            if time.monotonic() > deadline:
                raise Timeout(f"{key.full}: version {v} not durable in time")
            self.log.wait_durable(self.log.durable_seq + 1, 0.01)

    @staticmethod
    def _from_log(key: ObjectKey, rec) -> VersionedObject:
        prev = None if rec.prev_offset == NO_PREV else rec.prev_offset
        return VersionedObject(key, rec.payload, rec.version, prev, stable_hash(rec.payload))

    # -- introspection ------------------------------------------------------

    def keys(self) -> list[ObjectKey]:
        return list(self._keys.values())

    def __contains__(self, key: ObjectKey) -> bool:
        return key.full in self._slots

    def guard(self, key: ObjectKey) -> tuple[int, int]:
        return self._slots[key.full].guard()

    def table_digest(self) -> dict[str, tuple[int, int, int, int]]:
        """key -> (per_key_version, shard_seq, timestamp_us, payload checksum)."""
        out = {}
        for full, key in list(self._keys.items()):
            obj = self.get_current(key)
            v = obj.version
            out[full] = (v.per_key_version, v.shard_seq, v.timestamp_us, obj.payload_checksum)
        return out


class LruCache:
    """Byte-budgeted LRU map for objects a node reads but does not host."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._entries: OrderedDict[Hashable, VersionedObject] = OrderedDict()
        self._bytes = 0
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @property
    def size_bytes(self) -> int:
        return self._bytes

    def __len__(self) -> int:
        return len(self._entries)

    def cache_insert(self, key: Hashable, obj: VersionedObject) -> None:
        size = len(obj.payload)
        if size > self.capacity:
            return
        with self._lock:
            old = self._entries.pop(key, None)
            if old is not None:
                self._bytes -= len(old.payload)
            self._entries[key] = obj
            self._bytes += size
            while self._bytes > self.capacity:
                _, evicted = self._entries.popitem(last=False)
                self._bytes -= len(evicted.payload)

    def cache_lookup(self, key: Hashable) -> VersionedObject | None:
        with self._lock:
            obj = self._entries.get(key)
            if obj is None:
                self.misses += 1
                return None
            self._entries.move_to_end(key)
            self.hits += 1
            return obj
