"""Append-only per-shard-member log.

Record layout (little-endian, see docs/log_format.md)::

    u32 magic        0x564b4445 ("EDKV")
    u32 total_len    whole record including the trailing checksum
    u64 shard_seq
    u64 per_key_version
    u64 timestamp_us
    i64 prev_offset  offset of the previous record of the same key, or -1
    u32 key_len
    u32 payload_len
    key bytes (utf-8), payload bytes
    u64 checksum     FNV-1a over every preceding byte of the record

``append`` only stages a record; a write-back thread batches staged records
into one ``writev`` + ``fsync`` and then publishes them to the indexes.
Readers only ever see published (durable) records.
"""

from __future__ import annotations

import bisect
import logging
import os
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from .core import Version
from .errors import CorruptLog, KeyNotFound, LogFull, NotFound, Timeout, VersionNotFound
from .kernels import fnv1a64

log = logging.getLogger(__name__)

MAGIC = 0x564B4445
HEADER = struct.Struct("<IIQQQqII")
CHECKSUM = struct.Struct("<Q")
NO_PREV = -1
_IOV_MAX = 1000


def record_size(key: bytes, payload_len: int) -> int:
    return HEADER.size + len(key) + payload_len + CHECKSUM.size


def encode_record(key: bytes, payload, version: Version, prev_offset: int) -> list:
    """Buffers making up one record, ready for ``writev``."""
    total = record_size(key, len(payload))
    header = HEADER.pack(
        MAGIC, total, version.shard_seq, version.per_key_version,
        version.timestamp_us, prev_offset, len(key), len(payload),
    )
    h = fnv1a64(header)
    h = fnv1a64(key, h)
    h = fnv1a64(payload, h)
    return [header, key, payload, CHECKSUM.pack(h)]


@dataclass(slots=True)
class LogRecord:
    key: str
    payload: bytes
    version: Version
    prev_offset: int | None = None
    offset: int | None = None


@dataclass(frozen=True, slots=True)
class LoggedObject:
    key: str
    payload: bytes
    version: Version
    prev_offset: int
    offset: int


@dataclass(frozen=True, slots=True)
class StabilityFrontier:
    stable_seq: int = 0
    stable_ts: int = -1


class Ticket:
    """Resolves once the record is flushed and synced locally."""

    __slots__ = ("seq", "offset", "prev_offset", "_event", "error")

    def __init__(self, seq: int, offset: int, prev_offset: int):
        self.seq = seq
        self.offset = offset
        self.prev_offset = prev_offset
        self._event = threading.Event()
        self.error: BaseException | None = None

    def done(self) -> bool:
        return self._event.is_set()

    def wait(self, timeout: float | None = None) -> bool:
        ok = self._event.wait(timeout)
        if self.error is not None:
            raise self.error
        return ok

    def _resolve(self, error: BaseException | None = None) -> None:
        self.error = error
        self._event.set()


@dataclass
class IoProbe:
    write_calls: int = 0
    sync_calls: int = 0
    records_written: int = 0
    bytes_written: int = 0


@dataclass
class _Staged:
    record: LogRecord
    key_bytes: bytes
    ticket: Ticket


@dataclass
class ScanResult:
    records: list[LoggedObject] = field(default_factory=list)
    valid_bytes: int = 0
    file_bytes: int = 0


def scan_log(path: str | os.PathLike, with_payload: bool = True) -> ScanResult:
    """Read every valid record up to the first corrupt or partial one.

    Raises CorruptLog if the first record is complete but fails validation.
    """
    res = ScanResult()
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError:
        return res
    res.file_bytes = len(data)
    view = memoryview(data)
    pos = 0
    last_off: dict[str, int] = {}
    counts: dict[str, int] = {}
    last_seq = None
    while pos + HEADER.size <= len(data):
        magic, total, seq, pkv, ts, prev, klen, plen = HEADER.unpack_from(data, pos)
        complete = pos + total <= len(data)
        bad = (
            magic != MAGIC
            or total != HEADER.size + klen + plen + CHECKSUM.size
        )
        if not bad and not complete:
            break  # torn tail
        if not bad:
            body_end = pos + total - CHECKSUM.size
            (stored,) = CHECKSUM.unpack_from(data, body_end)
            bad = fnv1a64(view[pos:body_end]) != stored
        if not bad:
            key = bytes(view[pos + HEADER.size : pos + HEADER.size + klen]).decode("utf-8", "replace")
            expected_prev = last_off.get(key, NO_PREV)
            bad = (
                prev != expected_prev
                or pkv != counts.get(key, 0)
                or (last_seq is not None and seq != last_seq + 1)
            )
        if bad:
            if pos == 0:
                raise CorruptLog(f"{path}: first record is unreadable")
            break
        pstart = pos + HEADER.size + klen
        payload = bytes(view[pstart : pstart + plen]) if with_payload else b""
        res.records.append(LoggedObject(key, payload, Version(pkv, seq, ts), prev, pos))
        last_off[key] = pos
        counts[key] = pkv + 1
        last_seq = seq
        pos += total
    res.valid_bytes = pos
    return res


class PersistentLog:
    """One append-only log file plus its durable in-memory indexes."""

    def __init__(
        self,
        path: str | os.PathLike,
        *,
        flush_bytes: int = 1 << 20,
        flush_interval: float = 0.001,
        budget_bytes: int | None = None,
        fsync: bool = True,
        sync_delay: float = 0.0,
        on_durable: Callable[[int], None] | None = None,
    ):
        self.path = os.fspath(path)
        self.flush_bytes = flush_bytes
        self.flush_interval = flush_interval
        self.budget_bytes = budget_bytes
        self.fsync = fsync
        self.sync_delay = sync_delay
        self.on_durable = on_durable
        self.probe = IoProbe()

        self._cond = threading.Condition()
        self._staged: list[_Staged] = []
        self._staged_bytes = 0
        self._first_staged = 0.0
        self._closed = False

        # staging-side state (append context only)
        self._tail = 0
        self._last_seq = 0
        self._staged_last_off: dict[str, int] = {}
        self._staged_counts: dict[str, int] = {}

        # durable indexes, published by the write-back thread
        self._offsets: dict[str, list[int]] = {}
        self._times: dict[str, list[int]] = {}
        self.temporal: list[tuple[int, int, str, int]] = []
        self._seq_ts: list[int] = []
        self._first_seq = 1
        self.durable_seq = 0
        self._durable_bytes = 0
        self.frontier = StabilityFrontier()
        self._frontier_cond = threading.Condition()

        self.recovered: list[LoggedObject] = []
        self._recover()
        self._wfd = os.open(self.path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
        self._rfd = os.open(self.path, os.O_RDONLY)
        self._writer = threading.Thread(target=self._write_back, name=f"writeback:{self.path}", daemon=True)
        self._writer.start()

    # -- recovery ---------------------------------------------------------

    def _recover(self) -> None:
        res = scan_log(self.path, with_payload=False)
        if res.file_bytes > res.valid_bytes:
            log.warning("%s: dropping %d torn tail bytes", self.path, res.file_bytes - res.valid_bytes)
            os.truncate(self.path, res.valid_bytes)
        for rec in res.records:
            self._publish(rec.key, rec.version, rec.offset)
            self._staged_last_off[rec.key] = rec.offset
            self._staged_counts[rec.key] = rec.version.per_key_version + 1
        if res.records:
            self._first_seq = res.records[0].version.shard_seq
            self._last_seq = res.records[-1].version.shard_seq
            self.durable_seq = self._last_seq
        self._tail = res.valid_bytes
        self._durable_bytes = res.valid_bytes
        self.recovered = res.records

    def _publish(self, key: str, version: Version, offset: int) -> None:
        if not self._seq_ts:
            self._first_seq = version.shard_seq
        self._offsets.setdefault(key, []).append(offset)
        self._times.setdefault(key, []).append(version.timestamp_us)
        self._seq_ts.append(version.timestamp_us)
        bisect.insort(self.temporal, (version.timestamp_us, version.shard_seq, key, offset))

    # -- append path ------------------------------------------------------

    @property
    def last_seq(self) -> int:
        return self._last_seq

    def append(self, rec: LogRecord) -> Ticket:
        seq = rec.version.shard_seq
        assert self._last_seq == 0 or seq == self._last_seq + 1, (
            f"out-of-order append: seq {seq} after {self._last_seq}"
        )
        key_bytes = rec.key.encode("utf-8")
        size = record_size(key_bytes, len(rec.payload))
        if self.budget_bytes is not None and self._tail + size > self.budget_bytes:
            raise LogFull(f"{self.path}: {self._tail + size} bytes exceeds budget {self.budget_bytes}")
        prev = self._staged_last_off.get(rec.key, NO_PREV)
        expected = self._staged_counts.get(rec.key, 0)
        assert rec.version.per_key_version == expected, (
            f"{rec.key}: version {rec.version.per_key_version}, expected {expected}"
        )
        rec.prev_offset = prev
        rec.offset = self._tail
        ticket = Ticket(seq, self._tail, prev)
        self._staged_last_off[rec.key] = self._tail
        self._staged_counts[rec.key] = expected + 1
        self._tail += size
        self._last_seq = seq
        with self._cond:
            if not self._staged:
                self._first_staged = time.monotonic()
            self._staged.append(_Staged(rec, key_bytes, ticket))
            self._staged_bytes += size
            self._cond.notify()
        return ticket

    def _write_back(self) -> None:
        while True:
            with self._cond:
                while not self._staged and not self._closed:
                    self._cond.wait()
                if not self._staged and self._closed:
                    return
                deadline = self._first_staged + self.flush_interval
                while self._staged_bytes < self.flush_bytes and not self._closed:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        break
                    self._cond.wait(remaining)
                batch, self._staged = self._staged, []
                self._staged_bytes = 0
            self._flush(batch)

    def _flush(self, batch: list[_Staged]) -> None:
        bufs: list = []
        for st in batch:
            r = st.record
            bufs.extend(encode_record(st.key_bytes, r.payload, r.version, r.prev_offset))
        error = None
        try:
            for i in range(0, len(bufs), _IOV_MAX):
                chunk = bufs[i : i + _IOV_MAX]
                self.probe.bytes_written += os.writev(self._wfd, chunk)
                self.probe.write_calls += 1
            self.probe.records_written += len(batch)
            if self.fsync:
                os.fsync(self._wfd)
            self.probe.sync_calls += 1
            if self.sync_delay:
                time.sleep(self.sync_delay)
        except OSError as exc:  # pragma: no cover - disk failure
            log.error("%s: write-back failed: %s", self.path, exc)
            error = exc
        if error is None:
            for st in batch:
                r = st.record
                self._publish(r.key, r.version, r.offset)
            last = batch[-1].record
            self._durable_bytes = last.offset + record_size(batch[-1].key_bytes, len(last.payload))
            self.durable_seq = last.version.shard_seq
        with self._frontier_cond:
            self._frontier_cond.notify_all()
        for st in batch:
            st.ticket._resolve(error)
        if error is None and self.on_durable is not None:
            try:
                self.on_durable(self.durable_seq)
            except Exception:
                log.exception("on_durable callback failed")

    def wait_durable(self, seq: int, timeout: float | None = None) -> bool:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._frontier_cond:
            while self.durable_seq < seq:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return False
                self._frontier_cond.wait(remaining)
        return True

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify()
        self._writer.join()
        os.close(self._wfd)
        os.close(self._rfd)

    # -- reads (durable records only) -------------------------------------

    def _read_header(self, offset: int) -> tuple:
        return HEADER.unpack(os.pread(self._rfd, HEADER.size, offset))

    def read_at(self, offset: int) -> LoggedObject:
        magic, total, seq, pkv, ts, prev, klen, plen = self._read_header(offset)
        body = os.pread(self._rfd, klen + plen, offset + HEADER.size)
        key = body[:klen].decode("utf-8")
        return LoggedObject(key, body[klen:], Version(pkv, seq, ts), prev, offset)

    def has_key(self, key: str) -> bool:
        return key in self._offsets

    def durable_version_count(self, key: str) -> int:
        return len(self._offsets.get(key, ()))

    def staged_version_count(self, key: str) -> int:
        return self._staged_counts.get(key, 0)

    def _chain_offsets(self, key: str, v_lo: int, v_hi: int) -> list[int]:
        """Walk backpointers from the newest durable record down to v_lo."""
        offsets = self._offsets.get(key)
        if not offsets:
            raise KeyNotFound(key)
        newest = len(offsets) - 1
        if v_hi > newest or v_lo < 0:
            raise VersionNotFound(f"{key}: versions [{v_lo}, {v_hi}] not durable (newest {newest})")
        found: list[int] = []
        off = offsets[newest]
        v = newest
        while True:
            if v <= v_hi:
                found.append(off)
            if v == v_lo:
                break
            _, _, _, pkv, _, prev, _, _ = self._read_header(off)
            if prev == NO_PREV:
                raise CorruptLog(f"{key}: chain ends at version {pkv}")
            off = prev
            v -= 1
        found.reverse()
        return found

    def read_version(self, key: str, v: int) -> LoggedObject:
        (off,) = self._chain_offsets(key, v, v)
        return self.read_at(off)

    def read_range(self, key: str, v_lo: int, v_hi: int) -> list[LoggedObject]:
        return [self.read_at(off) for off in self._chain_offsets(key, v_lo, v_hi)]

    def walk_chain(self, key: str) -> list[LoggedObject]:
        """Every durable version of ``key``, newest first, via backpointers."""
        offsets = self._offsets.get(key)
        if not offsets:
            raise KeyNotFound(key)
        out = []
        off = offsets[-1]
        while off != NO_PREV:
            rec = self.read_at(off)
            out.append(rec)
            off = rec.prev_offset
        return out

    def keys(self) -> list[str]:
        return list(self._offsets)

    # -- temporal index ---------------------------------------------------

    def time_to_version(self, key: str, t: int) -> int:
        times = self._times.get(key)
        if not times:
            raise KeyNotFound(key)
        i = bisect.bisect_right(times, t) - 1
        if i < 0:
            raise NotFound(f"{key}: no version at or before t={t}")
        return i

    def range_by_time(self, t_lo: int, t_hi: int) -> list[tuple[int, int, str, int]]:
        """Temporal-index entries with t_lo <= timestamp <= t_hi."""
        lo = bisect.bisect_left(self.temporal, (t_lo,))
        hi = bisect.bisect_right(self.temporal, (t_hi, float("inf")))
        return self.temporal[lo:hi]

    def versions_in_time_window(self, key: str, t_lo: int, t_hi: int) -> tuple[int, int] | None:
        times = self._times.get(key)
        if not times:
            raise KeyNotFound(key)
        lo = bisect.bisect_left(times, t_lo)
        hi = bisect.bisect_right(times, t_hi) - 1
        return (lo, hi) if lo <= hi else None

    # -- stability frontier -----------------------------------------------

    def timestamp_of_seq(self, seq: int) -> int:
        return self._seq_ts[seq - self._first_seq]

    def advance_frontier(self, acked: Mapping[object, int] | Iterable[int]) -> StabilityFrontier:
        """stable_seq = min durable seq over all replicas (capped by local)."""
        values = list(acked.values()) if isinstance(acked, Mapping) else list(acked)
        if not values:
            return self.frontier
        candidate = min(min(values), self.durable_seq)
        if candidate > self.frontier.stable_seq and candidate >= self._first_seq and self._seq_ts:
            ts = self.timestamp_of_seq(candidate)
            with self._frontier_cond:
                self.frontier = StabilityFrontier(candidate, ts)
                self._frontier_cond.notify_all()
        return self.frontier

    def wait_stable(self, t: int, timeout: float) -> None:
        deadline = time.monotonic() + timeout
        with self._frontier_cond:
            while self.frontier.stable_ts < t:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise Timeout(f"frontier stuck at ts={self.frontier.stable_ts} < {t}")
                self._frontier_cond.wait(remaining)

    def get_by_time(self, key: str, t: int, timeout: float = 10.0) -> LoggedObject:
        if self.frontier.stable_ts < t:
            self.wait_stable(t, timeout)
        return self.read_version(key, self.time_to_version(key, t))
