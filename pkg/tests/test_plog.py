import os
import random
import struct
import threading
import time

import pytest

from edgekv.core import Version
from edgekv.errors import CorruptLog, KeyNotFound, LogFull, NotFound, Timeout, VersionNotFound
from edgekv.plog import LogRecord, PersistentLog, StabilityFrontier, scan_log


def raw_scan(path):
    """Test-side parser of the documented layout: [(seq, key, version, ts, prev, payload, offset)]."""
    out = []
    with open(path, "rb") as f:
        data = f.read()
    pos = 0
    while pos + 48 <= len(data):
        magic, total, seq, pkv, ts, prev, klen, plen = struct.unpack_from("<IIQQQqII", data, pos)
        if magic != 0x564B4445 or pos + total > len(data):
            break
        key = data[pos + 48 : pos + 48 + klen].decode()
        payload = data[pos + 48 + klen : pos + 48 + klen + plen]
        out.append((seq, key, pkv, ts, prev, payload, pos))
        pos += total
    return out


def oracle_time_to_version(path, key, t):
    best = None
    for seq, k, pkv, ts, prev, payload, off in raw_scan(path):
        if k == key and ts <= t:
            best = pkv
    return best


class Writer:
    """Feeds a log the way the delivery context does."""

    def __init__(self, log, seq=0):
        self.log = log
        self.seq = seq
        self.counts = {}

    def put(self, key, payload, ts):
        self.seq += 1
        v = self.counts.get(key, 0)
        self.counts[key] = v + 1
        return self.log.append(LogRecord(key, payload, Version(v, self.seq, ts)))


@pytest.fixture
def logpath(tmp_path):
    return tmp_path / "shard.log"


def test_single_append_single_sync(logpath):
    log = PersistentLog(logpath)
    t = Writer(log).put("/p/k", b"x", 1)
    assert t.wait(2)
    assert log.probe.sync_calls == 1
    log.close()


def test_batched_appends(logpath):
    log = PersistentLog(logpath)
    w = Writer(log)
    tickets = [w.put(f"/p/k{i % 7}", os.urandom(100), i + 1) for i in range(100)]
    for t in tickets:
        assert t.wait(5)
    assert log.probe.sync_calls <= 100
    assert log.probe.records_written == 100
    # every record is written exactly once
    assert log.probe.bytes_written == os.path.getsize(logpath)
    assert log.probe.write_calls <= log.probe.records_written
    log.close()


def test_out_of_order_append_is_rejected(logpath):
    log = PersistentLog(logpath)
    log.append(LogRecord("/p/k", b"a", Version(0, 1, 1)))
    with pytest.raises(AssertionError):
        log.append(LogRecord("/p/k", b"b", Version(1, 3, 2)))
    log.close()


def test_log_full(logpath):
    log = PersistentLog(logpath, budget_bytes=200)
    w = Writer(log)
    w.put("/p/k", b"x" * 50, 1)
    with pytest.raises(LogFull):
        w.put("/p/k", b"x" * 100, 2)
    log.close()


def test_backpointers_and_chain(logpath):
    log = PersistentLog(logpath)
    w = Writer(log)
    for i in range(5):
        w.put("/p/a", f"a{i}".encode(), 10 + i)
        w.put("/p/b", f"b{i}".encode(), 10 + i)
    log.wait_durable(10, 5)
    recs = raw_scan(logpath)
    by_off = {r[6]: r for r in recs}
    for seq, key, pkv, ts, prev, payload, off in recs:
        if pkv == 0:
            assert prev == -1
        else:
            assert by_off[prev][1] == key and by_off[prev][2] == pkv - 1
    chain = log.walk_chain("/p/a")
    assert [c.version.per_key_version for c in chain] == [4, 3, 2, 1, 0]
    assert log.read_version("/p/b", 2).payload == b"b2"
    assert [r.payload for r in log.read_range("/p/a", 1, 3)] == [b"a1", b"a2", b"a3"]
    with pytest.raises(VersionNotFound):
        log.read_version("/p/a", 7)
    with pytest.raises(KeyNotFound):
        log.read_version("/p/zzz", 0)
    log.close()


def test_time_to_version_examples(logpath):
    log = PersistentLog(logpath)
    w = Writer(log)
    for ts in (100_000, 110_000, 120_000):
        w.put("/p/k", str(ts).encode(), ts)
    log.wait_durable(3, 5)
    assert oracle_time_to_version(logpath, "/p/k", 115_000) == 1
    assert log.time_to_version("/p/k", 115_000) == 1
    assert log.time_to_version("/p/k", 110_000) == 1  # inclusive boundary
    assert log.time_to_version("/p/k", 120_000) == 2
    with pytest.raises(NotFound):
        log.time_to_version("/p/k", 99_999)
    with pytest.raises(KeyNotFound):
        log.time_to_version("/p/other", 115_000)
    log.close()


def test_time_to_version_matches_raw_scan_oracle(logpath):
    rng = random.Random(7)
    log = PersistentLog(logpath)
    w = Writer(log)
    keys = [f"/p/k{i}" for i in range(10)]
    ts = 1_000
    for _ in range(1000):
        ts += rng.choice([0, 1, 5, 50])  # repeated timestamps exercise ties
        w.put(rng.choice(keys), b"v", ts)
    log.wait_durable(w.seq, 10)
    stamps = [r[3] for r in raw_scan(logpath)]
    for _ in range(2000):
        key = rng.choice(keys)
        t = rng.choice(stamps) if rng.random() < 0.5 else rng.randint(900, ts + 100)
        expected = oracle_time_to_version(logpath, key, t)
        if expected is None:
            with pytest.raises(NotFound):
                log.time_to_version(key, t)
        else:
            assert log.time_to_version(key, t) == expected
    log.close()


def test_temporal_index_sorted_one_entry_per_record(logpath):
    log = PersistentLog(logpath)
    w = Writer(log)
    for i in range(50):
        w.put(f"/p/k{i % 3}", b"x", 1000 + i // 2)
    log.wait_durable(50, 5)
    assert len(log.temporal) == 50
    assert log.temporal == sorted(log.temporal)
    assert [e[1] for e in log.temporal] == list(range(1, 51))
    window = log.range_by_time(1005, 1007)
    assert {e[0] for e in window} == {1005, 1006, 1007}
    assert log.versions_in_time_window("/p/k0", 1005, 1010) is not None
    log.close()


def test_advance_frontier(logpath):
    log = PersistentLog(logpath)
    w = Writer(log)
    for i in range(5):
        w.put("/p/k", b"x", 100 + i)
    log.wait_durable(5, 5)
    assert log.advance_frontier({}) == StabilityFrontier()
    f = log.advance_frontier({1: 5, 2: 3, 3: 4})
    assert f.stable_seq == 3 and f.stable_ts == 102
    # never moves backwards
    assert log.advance_frontier({1: 1, 2: 1, 3: 1}).stable_seq == 3
    # single replica: its own durable seq
    assert log.advance_frontier([log.durable_seq]).stable_seq == 5
    # capped by what is locally durable
    assert log.advance_frontier([99]).stable_seq == 5
    log.close()


def test_get_by_time_stable_past_is_immediate(logpath):
    log = PersistentLog(logpath)
    w = Writer(log)
    for i in range(3):
        w.put("/p/k", f"v{i}".encode(), 100 + 10 * i)
    log.wait_durable(3, 5)
    log.advance_frontier([3])
    t0 = time.monotonic()
    assert log.get_by_time("/p/k", 115).payload == b"v1"
    assert time.monotonic() - t0 < 0.05
    log.close()


def test_get_by_time_future_without_puts_times_out(logpath):
    log = PersistentLog(logpath)
    Writer(log).put("/p/k", b"v", 100)
    log.wait_durable(1, 5)
    log.advance_frontier([1])
    with pytest.raises(Timeout):
        log.get_by_time("/p/k", 10_000, timeout=0.1)
    log.close()


def test_get_by_time_delays_until_stable(logpath):
    log = PersistentLog(logpath)
    w = Writer(log)
    now = lambda: time.time_ns() // 1000
    w.put("/p/k", b"start", now())
    stop = threading.Event()

    def producer():
        while not stop.is_set():
            time.sleep(0.01)
            w.put("/p/k", str(now()).encode(), now())

    def frontier():
        while not stop.is_set():
            log.advance_frontier([log.durable_seq])
            time.sleep(0.001)

    threads = [threading.Thread(target=producer), threading.Thread(target=frontier)]
    for th in threads:
        th.start()
    try:
        target = now() + 50_000
        t0 = time.monotonic()
        obj = log.get_by_time("/p/k", target, timeout=2)
        waited = time.monotonic() - t0
    finally:
        stop.set()
        for th in threads:
            th.join()
    assert 0.03 <= waited <= 0.2
    expected = oracle_time_to_version(logpath, "/p/k", target)
    assert obj.version.per_key_version == expected
    log.close()


def test_recover_clean_shutdown(logpath):
    log = PersistentLog(logpath)
    w = Writer(log)
    for i in range(20):
        w.put(f"/p/k{i % 4}", os.urandom(30), 500 + i)
    log.wait_durable(20, 5)
    before = (dict(log._offsets), dict(log._times), list(log.temporal), log.durable_seq)
    log.close()
    again = PersistentLog(logpath)
    after = (dict(again._offsets), dict(again._times), list(again.temporal), again.durable_seq)
    assert before == after
    # appends continue after the recovered tail
    resumed = Writer(again, seq=20)
    resumed.counts["/p/k0"] = again.durable_version_count("/p/k0")
    resumed.put("/p/k0", b"more", 999).wait(5)
    again.close()
    assert len(raw_scan(logpath)) == 21


def test_recover_truncated_tail(logpath):
    log = PersistentLog(logpath)
    w = Writer(log)
    for i in range(10):
        w.put("/p/k", b"x" * 100, i + 1)
    log.wait_durable(10, 5)
    log.close()
    size = os.path.getsize(logpath)
    with open(logpath, "r+b") as f:
        f.truncate(size - 37)
    res = scan_log(logpath)
    assert len(res.records) == 9
    again = PersistentLog(logpath)
    assert again.durable_seq == 9
    assert os.path.getsize(logpath) == res.valid_bytes
    again.close()


def test_recover_corrupt_record_mid_file(logpath):
    log = PersistentLog(logpath)
    w = Writer(log)
    for i in range(10):
        w.put("/p/k", b"y" * 10, i + 1)
    log.wait_durable(10, 5)
    log.close()
    off = raw_scan(logpath)[6][6]
    with open(logpath, "r+b") as f:
        f.seek(off + 60)
        f.write(b"\xff")
    assert len(scan_log(logpath).records) == 6


def test_recover_empty_and_corrupt_first(logpath):
    logpath.write_bytes(b"")
    assert scan_log(logpath).records == []
    log = PersistentLog(logpath)
    assert log.durable_seq == 0
    log.close()
    logpath.write_bytes(b"\x00" * 100)
    with pytest.raises(CorruptLog):
        scan_log(logpath)
