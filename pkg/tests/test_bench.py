import csv
import time

from hypothesis import given
from hypothesis import strategies as st

from edgekv.bench import pipeline_dfg, run_fastpath_bench, run_pipeline_bench, run_put_bench, trie_level_cost
from edgekv.bench.load import schedule
from edgekv.bench.report import (
    SAMPLE_COLUMNS,
    SUMMARY_COLUMNS,
    BenchReport,
    LatencySample,
    percentile,
    summarize,
)
from edgekv.core import PoolDescriptor, PoolRegistry
from edgekv.dfg import load_dfg


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=200), st.floats(0, 100))
def test_percentile_is_an_element_with_enough_below(values, q):
    p = percentile(values, q)
    assert p in values
    below = sum(v <= p for v in values)
    assert below >= q / 100 * len(values) - 1e-9


def test_schedule_paces_sends_in_open_loop():
    t0 = time.monotonic_ns()
    times = list(schedule(200, 0.5, t0))
    assert len(times) == 100
    assert all(b - a == 5_000_000 for a, b in zip(times, times[1:]))
    wall = (time.monotonic_ns() - t0) / 1e9
    # the last send is due at 0.495 s; the achieved rate stays within 2%
    assert abs(wall - 0.495) / 0.495 < 0.02 + 0.01 / 0.495


def sample(i, **kw):
    base = dict(op_id=i, bench="put", op="vola", size=10, rate=1.0, scheduled_ns=1000, client_send_ns=2000,
                seq_recv_ns=3000, delivered_ns=5000, applied_ns=6000, client_recv_ns=9000)
    base.update(kw)
    return LatencySample(**base)


def test_components_add_up_to_service_time():
    s = sample(0)
    assert s.stages_monotone()
    assert sum(s.components().values()) == s.service_us == 7.0
    assert s.latency_us == 8.0
    assert not sample(1, applied_ns=4000).stages_monotone()


def test_csv_files_have_documented_columns(tmp_path):
    samples = [sample(i) for i in range(5)] + [sample(5, error="Timeout", client_recv_ns=0)]
    row = summarize(samples, bench="put", op="vola", size=10, rate=1.0)
    assert (row.n, row.errors) == (5, 1)
    rep = BenchReport([row], samples)
    raw, summary = rep.write_csv(tmp_path / "out.csv")
    with raw.open() as f:
        rows = list(csv.reader(f))
    assert rows[0] == SAMPLE_COLUMNS and len(rows) == 7
    assert rows[-1][-2:] == ["", ""]
    with summary.open() as f:
        srows = list(csv.DictReader(f))
    assert list(srows[0]) == SUMMARY_COLUMNS
    assert srows[0]["persist_us"] == "" and float(srows[0]["replicate_us"]) == 2.0


def test_saturation_is_annotated():
    rep = BenchReport([summarize([sample(0, client_recv_ns=10**9)], bench="put", op="vola", size=1, rate=1)])
    rep.mark_saturation(10.0)
    assert rep.rows[0].saturated and type(rep.annotations[0]).__name__ == "SaturationDetected"
    assert "SATURATED" in rep.format_table()


def test_pipeline_dfg_is_valid():
    for edge in ("trigger", "volatile"):
        dfg = pipeline_dfg(3, edge)
        reg = PoolRegistry([PoolDescriptor(p) for p in dfg["pools"]])
        g = load_dfg(dfg, reg)
        assert [v.lambda_id for v in g.vertices] == ["relay", "relay", "notify"]


def test_small_put_bench(tmp_path):
    rep = run_put_bench(["vola", "pers", "trig"], size=256, rate=50, duration=0.4, mode="thread",
                        baseline=False, csv_path=tmp_path / "put.csv", warmup=0.1)
    for op in ("vola", "pers", "trig"):
        r = rep.row(op=op)
        assert r.n >= 15 and r.errors == 0
    assert all(s.stages_monotone() for s in rep.samples if s.ok)
    assert (tmp_path / "put.summary.csv").exists()


def test_small_pipeline_bench(tmp_path):
    rep = run_pipeline_bench(2, "trigger", size=64, rate=40, duration=0.5, nodes=3, inflight=4,
                             mode="thread", throughput=True, csv_path=tmp_path / "p.csv", warmup=2)
    r = rep.row(op="trigger", k=2, bench="pipeline")
    assert r.n >= 15 and r.errors == 0


def test_small_fastpath_bench():
    rep = run_fastpath_bench([1024], ["round_robin"], rate=100, duration=0.4, workers=2, trie=False)
    r = rep.row(size=1024)
    assert r.n >= 30
    assert {"receive", "enqueue", "dequeue", "upcall"} <= set(r.breakdown)


def test_trie_cost_is_reported():
    out = trie_level_cost(depths=(2, 16), registrations=50, queries=2000)
    assert out["ns_per_level"] > 0
