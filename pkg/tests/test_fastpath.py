import random
import threading
import time

import pytest
from hypothesis import given, settings, strategies as st

from edgekv.core import ObjectKey, Version
from edgekv.errors import DuplicateRegistration, QueueFull
from edgekv.fastpath import (
    Dispatcher,
    DispatchPolicy,
    LambdaRegistration,
    PrefixTrie,
    TriggerObject,
    member_for,
)
from edgekv.shard import VersionedObject


def brute_match(regs, full):
    """Linear scan oracle: prefix p matches iff key == p or key starts with p + '/'."""
    hits = [r for r in regs if full == r.prefix or full.startswith(r.prefix + "/")]
    return sorted(hits, key=lambda r: r.prefix.count("/"))


def obj(key, seq=1, payload=b"x"):
    pool, _, suffix = key.rpartition("/")
    return VersionedObject(ObjectKey(pool, suffix), payload, Version(0, seq, 0), None, 0)


def test_match_examples():
    trie = PrefixTrie()
    f = LambdaRegistration("lf", "/sf/detect_animal")
    x = LambdaRegistration("lx", "/sf")
    trie.insert(f)
    trie.insert(x)
    assert trie.match("/sf/detect_animal/img1") == [x, f]
    trie.insert(LambdaRegistration("cms", "/cms/top"))
    assert trie.match("/cms/topics/T") == []
    assert PrefixTrie().match("/a/b") == []


def test_duplicate_registration():
    trie = PrefixTrie()
    trie.insert(LambdaRegistration("l", "/a"))
    with pytest.raises(DuplicateRegistration):
        trie.insert(LambdaRegistration("l", "/a", DispatchPolicy.FIFO_BY_KEY))
    trie.insert(LambdaRegistration("l", "/a/b"))
    trie.insert(LambdaRegistration("m", "/a"))
    assert len(trie) == 3


def test_remove():
    trie = PrefixTrie()
    r = LambdaRegistration("l", "/a/b")
    trie.insert(r)
    assert trie.remove(r)
    assert not trie.remove(r)
    assert trie.match("/a/b/c") == []


components = st.sampled_from(["a", "b", "c", "ab", "a.b", "x1"])
paths = st.lists(components, min_size=1, max_size=5).map(lambda c: "/" + "/".join(c))


@settings(max_examples=100, deadline=None)
@given(st.lists(paths, max_size=30, unique=True), st.lists(paths, min_size=1, max_size=30))
def test_trie_equals_brute_force(prefixes, keys):
    regs = [LambdaRegistration(f"l{i}", p) for i, p in enumerate(prefixes)]
    trie = PrefixTrie()
    for r in regs:
        trie.insert(r)
    for k in keys:
        assert trie.match(k) == brute_match(regs, k)


def test_registration_validates_prefix():
    with pytest.raises(Exception):
        LambdaRegistration("l", "no-slash")


class Recorder:
    def __init__(self, delay=0.0):
        self.lock = threading.Lock()
        self.seen = []
        self.delay = delay

    def __call__(self, o):
        if self.delay:
            time.sleep(self.delay)
        with self.lock:
            self.seen.append((threading.current_thread().name, o.key.full, o.version.shard_seq))


def test_register_then_dispatch_one_upcall():
    rec = Recorder()
    d = Dispatcher(workers=2)
    d.register(LambdaRegistration("l", "/p", handler=rec))
    d.submit(obj("/p/k"))
    d.submit(obj("/q/k"))
    assert d.drain()
    time.sleep(0.05)
    assert len(rec.seen) == 1
    assert d.dropped == 1
    d.stop()


def test_round_robin_cycles_per_registration():
    d = Dispatcher(workers=4, start=False)
    d.register(LambdaRegistration("l", "/p"))
    d.register(LambdaRegistration("m", "/p/x"))
    for i in range(8):
        d.dispatch(obj("/p/x/k", seq=i))
    per_queue = {}
    for qi, q in enumerate(d.queues):
        while not q.empty():
            ev = q.get_nowait()
            per_queue.setdefault((ev.reg.lambda_id, qi), 0)
            per_queue[(ev.reg.lambda_id, qi)] += 1
    assert per_queue == {(lid, qi): 2 for lid in ("l", "m") for qi in range(4)}


def test_fifo_same_key_same_queue_in_order():
    d = Dispatcher(workers=4, start=False)
    d.register(LambdaRegistration("l", "/p", DispatchPolicy.FIFO_BY_KEY))
    for i in range(5):
        d.dispatch(obj("/p/cam0", seq=i))
    nonempty = [q for q in d.queues if not q.empty()]
    assert len(nonempty) == 1
    assert [nonempty[0].get_nowait().obj.version.shard_seq for _ in range(5)] == list(range(5))


def test_events_share_one_object():
    d = Dispatcher(workers=2, start=False)
    for i, p in enumerate(["/p", "/p/a", "/p/a/b"]):
        d.register(LambdaRegistration(f"l{i}", p))
    o = obj("/p/a/b/c")
    assert d.dispatch(o) == 3
    events = [q.get_nowait() for q in d.queues for _ in range(q.qsize())]
    assert len(events) == 3
    assert all(ev.obj is o for ev in events)


def test_fifo_order_under_many_workers():
    rec = Recorder()
    d = Dispatcher(workers=16)
    d.register(LambdaRegistration("l", "/p", DispatchPolicy.FIFO_BY_KEY, handler=rec))
    rng = random.Random(3)
    for seq in range(5000):
        d.submit(obj(f"/p/k{rng.randrange(40)}", seq=seq))
    d.drain()
    deadline = time.monotonic() + 5
    while len(rec.seen) < 5000 and time.monotonic() < deadline:
        time.sleep(0.01)
    d.stop()
    per_key = {}
    for _, key, seq in rec.seen:
        per_key.setdefault(key, []).append(seq)
    assert sum(map(len, per_key.values())) == 5000
    assert all(s == sorted(s) for s in per_key.values())


def test_lambda_failure_is_isolated():
    rec = Recorder()

    def boom(o):
        if o.version.shard_seq == 1:
            raise RuntimeError("bad input")
        rec(o)

    d = Dispatcher(workers=1)
    d.register(LambdaRegistration("boom", "/p", handler=boom))
    d.submit(obj("/p/k", seq=1))
    d.submit(obj("/p/k", seq=2))
    deadline = time.monotonic() + 2
    while not rec.seen and time.monotonic() < deadline:
        time.sleep(0.01)
    d.stop()
    assert [s for _, _, s in rec.seen] == [2]
    assert d.failures[0].lambda_id == "boom" and "bad input" in d.failures[0].error


def test_idle_workers_do_not_spin():
    d = Dispatcher(workers=8)
    time.sleep(0.05)
    t0 = time.process_time()
    time.sleep(0.5)
    used = time.process_time() - t0
    d.stop()
    assert used < 0.05


def test_full_inbox_signals_backpressure():
    d = Dispatcher(workers=1, queue_bound=2, start=False)
    d.submit(obj("/p/k"))
    d.submit(obj("/p/k"))
    with pytest.raises(QueueFull):
        d.submit(obj("/p/k"), timeout=0.01)


def test_placement_selects_one_member():
    regs = [LambdaRegistration("rr", "/p"), LambdaRegistration("ff", "/p", DispatchPolicy.FIFO_BY_KEY)]
    for reg in regs:
        for seq in range(30):
            runners = []
            for idx in range(3):
                d = Dispatcher(workers=1, start=False)
                d.register(reg)
                if d.dispatch(obj("/p/k", seq=seq), placement=(idx, 3)):
                    runners.append(idx)
            assert len(runners) == 1
    assert len({member_for(regs[1], "/p/k", s, 3) for s in range(30)}) == 1
    assert {member_for(regs[0], "/p/k", s, 3) for s in range(30)} == {0, 1, 2}


def test_trigger_object_dispatches():
    d = Dispatcher(workers=1, start=False)
    d.register(LambdaRegistration("l", "/p"))
    assert d.dispatch(TriggerObject(ObjectKey("/p", "k"), b"x")) == 1
