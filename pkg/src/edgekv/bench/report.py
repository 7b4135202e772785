"""Samples, summaries and the two CSV files every bench writes."""

from __future__ import annotations

import csv
import statistics
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..errors import SaturationDetected

SATURATION_FACTOR = 10.0

# stage timestamps in the order they happen; 0 means "not measured for this op"
STAGES = (
    "scheduled_ns",
    "client_send_ns",
    "seq_recv_ns",
    "delivered_ns",
    "applied_ns",
    "persisted_ns",
    "reply_ns",
    "recv_ns",
    "enqueue_ns",
    "dequeue_ns",
    "lambda_start_ns",
    "lambda_end_ns",
    "client_recv_ns",
)

COMPONENTS = ("submit", "replicate", "apply", "persist", "reply", "receive", "enqueue", "dequeue", "upcall")


@dataclass
class LatencySample:
    op_id: int
    bench: str
    op: str
    size: int
    rate: float
    k: int = 0
    client: int = 0
    scheduled_ns: int = 0
    client_send_ns: int = 0
    seq_recv_ns: int = 0
    delivered_ns: int = 0
    applied_ns: int = 0
    persisted_ns: int = 0
    reply_ns: int = 0
    recv_ns: int = 0
    enqueue_ns: int = 0
    dequeue_ns: int = 0
    lambda_start_ns: int = 0
    lambda_end_ns: int = 0
    client_recv_ns: int = 0
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error and self.client_recv_ns > 0

    @property
    def latency_us(self) -> float:
        """From the scheduled send time, so queueing before the send counts."""
        start = self.scheduled_ns or self.client_send_ns
        return (self.client_recv_ns - start) / 1000

    @property
    def service_us(self) -> float:
        return (self.client_recv_ns - self.client_send_ns) / 1000

    def components(self) -> dict[str, float]:
        """Per-stage durations in microseconds; only the stages this op has."""
        out: dict[str, float] = {}
        if self.seq_recv_ns:
            done = max(self.applied_ns, self.persisted_ns)
            out["submit"] = (self.seq_recv_ns - self.client_send_ns) / 1000
            out["replicate"] = (self.delivered_ns - self.seq_recv_ns) / 1000
            out["apply"] = (self.applied_ns - self.delivered_ns) / 1000
            if self.persisted_ns:
                out["persist"] = max(0, self.persisted_ns - self.applied_ns) / 1000
            out["reply"] = (self.client_recv_ns - done) / 1000
        if self.enqueue_ns:
            out["receive"] = (self.recv_ns - self.client_send_ns) / 1000
            out["enqueue"] = (self.enqueue_ns - self.recv_ns) / 1000
            out["dequeue"] = (self.dequeue_ns - self.enqueue_ns) / 1000
            out["upcall"] = (self.lambda_end_ns - self.dequeue_ns) / 1000
        return out

    def stages_monotone(self) -> bool:
        seen = [getattr(self, s) for s in STAGES if getattr(self, s)]
        return all(a <= b for a, b in zip(seen, seen[1:]))


SAMPLE_COLUMNS = [f.name for f in fields(LatencySample)] + ["latency_us", "service_us"]


@dataclass
class SummaryRow:
    bench: str
    op: str
    size: int
    rate: float
    k: int
    clients: int
    n: int
    errors: int
    achieved_rate: float
    throughput: float
    p50_us: float
    p90_us: float
    p99_us: float
    mean_us: float
    service_p50_us: float
    breakdown: dict[str, float] = field(default_factory=dict)
    saturated: bool = False

    def flat(self) -> dict:
        d = asdict(self)
        bd = d.pop("breakdown")
        for c in COMPONENTS:
            d[f"{c}_us"] = round(bd[c], 3) if c in bd else ""
        return d


SUMMARY_COLUMNS = [f.name for f in fields(SummaryRow) if f.name != "breakdown"] + [f"{c}_us" for c in COMPONENTS]


def percentile(values: list[float], q: float) -> float:
    """Nearest-rank percentile; ``q`` in [0, 100]."""
    if not values:
        return float("nan")
    s = sorted(values)
    idx = max(0, min(len(s) - 1, int(round(q / 100 * len(s) + 0.5)) - 1))
    return s[idx]


def summarize(
    samples: list[LatencySample], *, bench: str, op: str, size: int, rate: float, k: int = 0, clients: int = 1,
    wall_s: float | None = None,
) -> SummaryRow:
    ok = [s for s in samples if s.ok]
    lat = [s.latency_us for s in ok]
    svc = [s.service_us for s in ok]
    sends = sorted(s.client_send_ns for s in samples if s.client_send_ns)
    span = (sends[-1] - sends[0]) / 1e9 if len(sends) > 1 else 0.0
    achieved = (len(sends) - 1) / span if span > 0 else 0.0
    if wall_s is None:
        ends = [s.client_recv_ns for s in ok]
        wall_s = (max(ends) - min(sends)) / 1e9 if ok and sends else 0.0
    throughput = len(ok) / wall_s if wall_s > 0 else 0.0
    comps: dict[str, list[float]] = {}
    for s in ok:
        for name, v in s.components().items():
            comps.setdefault(name, []).append(v)
    return SummaryRow(
        bench=bench, op=op, size=size, rate=rate, k=k, clients=clients, n=len(ok), errors=len(samples) - len(ok),
        achieved_rate=round(achieved, 2), throughput=round(throughput, 2),
        p50_us=round(percentile(lat, 50), 3), p90_us=round(percentile(lat, 90), 3), p99_us=round(percentile(lat, 99), 3),
        mean_us=round(statistics.fmean(lat), 3) if lat else float("nan"),
        service_p50_us=round(percentile(svc, 50), 3),
        breakdown={name: statistics.fmean(v) for name, v in comps.items()},
    )


@dataclass
class BenchReport:
    rows: list[SummaryRow] = field(default_factory=list)
    samples: list[LatencySample] = field(default_factory=list)
    annotations: list[Exception] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def row(self, **match) -> SummaryRow:
        for r in self.rows:
            if all(getattr(r, k) == v for k, v in match.items()):
                return r
        raise KeyError(match)

    def mark_saturation(self, baseline_p99: float) -> None:
        """Flag rows whose p99 exceeds ``SATURATION_FACTOR`` times the light-load p99."""
        for r in self.rows:
            if baseline_p99 > 0 and r.p99_us > SATURATION_FACTOR * baseline_p99:
                r.saturated = True
                self.annotations.append(
                    SaturationDetected(
                        f"{r.op} {r.size}B at {r.rate}/s: p99 {r.p99_us:.0f}us > "
                        f"{SATURATION_FACTOR:g}x light-load p99 {baseline_p99:.0f}us"
                    )
                )

    def write_csv(self, path: str | Path) -> tuple[Path, Path]:
        """Raw samples to ``path``; the summary to ``<stem>.summary.csv`` next to it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(SAMPLE_COLUMNS)
            for s in self.samples:
                row = [getattr(s, c) for c in SAMPLE_COLUMNS[:-2]]
                if s.ok:
                    row += [round(s.latency_us, 3), round(s.service_us, 3)]
                else:
                    row += ["", ""]
                w.writerow(row)
        summary = path.with_name(path.stem + ".summary.csv")
        with summary.open("w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=SUMMARY_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow(r.flat())
        return path, summary

    def format_table(self) -> str:
        cols = ["bench", "op", "size", "rate", "k", "n", "errors", "throughput", "p50_us", "p90_us", "p99_us"]
        lines = ["  ".join(f"{c:>10}" for c in cols)]
        for r in self.rows:
            d = r.flat()
            lines.append("  ".join(f"{str(d[c]):>10}" for c in cols) + ("  SATURATED" if r.saturated else ""))
        for a in self.annotations:
            lines.append(f"note: {type(a).__name__}: {a}")
        return "\n".join(lines)
