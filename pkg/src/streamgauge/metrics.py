"""Driver-side latency accounting.

Every output is reduced to two latencies, ``emission - max_event_time`` and
``emission - max_ingest_time``, bucketed at 1 ms and indexed by the second of
the run in which it was emitted. Warmup exclusion works on that second index.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import NS_PER_MS, NS_PER_SEC
from .protocol import QueryKind

BUCKET_NS = NS_PER_MS
N_BUCKETS = 300_000  # 1 ms buckets up to 300 s; index N_BUCKETS is the overflow bucket
QUANTILES = (0.5, 0.9, 0.95, 0.99)


class EmptyAfterWarmup(ValueError):
    pass


class InsufficientData(ValueError):
    pass


def bucket_of(values_ns: np.ndarray) -> np.ndarray:
    """Bucket k covers [k - 0.5, k + 0.5) ms, so its midpoint is exactly k ms."""
    b = (np.asarray(values_ns, dtype=np.int64) + BUCKET_NS // 2) // BUCKET_NS
    return np.minimum(b, N_BUCKETS)


def nearest_rank(n: int, q: float) -> int:
    return max(1, math.ceil(q * n - 1e-9))


class _Shard:
    __slots__ = ("counts", "n", "total", "sumsq", "lo", "hi")

    def __init__(self):
        self.counts: dict[int, int] = {}
        self.n = 0
        self.total = 0
        self.sumsq = 0.0
        self.lo: Optional[int] = None
        self.hi: Optional[int] = None

    def add(self, values: np.ndarray) -> None:
        if len(values) == 0:
            return
        keys, cnt = np.unique(bucket_of(values), return_counts=True)
        counts = self.counts
        for k, c in zip(keys.tolist(), cnt.tolist()):
            counts[k] = counts.get(k, 0) + c
        self.n += len(values)
        self.total += int(values.sum())
        self.sumsq += float(np.square(values.astype(np.float64)).sum())
        lo, hi = int(values.min()), int(values.max())
        self.lo = lo if self.lo is None else min(self.lo, lo)
        self.hi = hi if self.hi is None else max(self.hi, hi)

    def merge(self, other: "_Shard") -> None:
        for k, c in other.counts.items():
            self.counts[k] = self.counts.get(k, 0) + c
        self.n += other.n
        self.total += other.total
        self.sumsq += other.sumsq
        if other.lo is not None:
            self.lo = other.lo if self.lo is None else min(self.lo, other.lo)
            self.hi = other.hi if self.hi is None else max(self.hi, other.hi)


class Histogram:
    """Fixed 1 ms buckets up to 300 s plus overflow, sharded by run second."""

    def __init__(self):
        self.shards: dict[int, _Shard] = {}

    def add(self, values_ns, second: int | np.ndarray = 0) -> None:
        values = np.asarray(values_ns, dtype=np.int64)
        if np.ndim(second) == 0:
            self.shards.setdefault(int(second), _Shard()).add(values)
            return
        second = np.asarray(second, dtype=np.int64)
        for s in np.unique(second).tolist():
            self.shards.setdefault(s, _Shard()).add(values[second == s])

    def merge(self, other: "Histogram") -> "Histogram":
        for s, shard in other.shards.items():
            self.shards.setdefault(s, _Shard()).merge(shard)
        return self

    @property
    def total(self) -> int:
        return sum(s.n for s in self.shards.values())

    @property
    def last_second(self) -> int:
        return max(self.shards, default=-1)

    def combined(self, seconds: Optional[Iterable[int]] = None) -> _Shard:
        out = _Shard()
        for s in (self.shards if seconds is None else seconds):
            if s in self.shards:
                out.merge(self.shards[s])
        return out


@dataclass(frozen=True)
class MetricsSummary:
    """Latency statistics in nanoseconds."""

    n: int
    avg: float
    min: int
    max: int
    p50: int
    q90: int
    q95: int
    q99: int
    stddev: float

    def to_seconds(self) -> dict:
        d = asdict(self)
        return {k: (v if k == "n" else v / NS_PER_SEC) for k, v in d.items()}


def _summary_of(shard: _Shard) -> MetricsSummary:
    n = shard.n
    if n == 0:
        raise EmptyAfterWarmup("no samples to summarise")
    keys = np.fromiter(shard.counts.keys(), dtype=np.int64, count=len(shard.counts))
    cnts = np.fromiter(shard.counts.values(), dtype=np.int64, count=len(shard.counts))
    order = np.argsort(keys)
    keys, cum = keys[order], np.cumsum(cnts[order])

    def q(p: float) -> int:
        k = int(keys[np.searchsorted(cum, nearest_rank(n, p))])
        if k >= N_BUCKETS:
            return shard.hi
        return min(max(k * BUCKET_NS, shard.lo), shard.hi)

    avg = shard.total / n
    var = max(shard.sumsq / n - avg * avg, 0.0)
    return MetricsSummary(
        n=n,
        avg=min(max(avg, shard.lo), shard.hi),
        min=shard.lo,
        max=shard.hi,
        p50=q(0.5),
        q90=q(0.9),
        q95=q(0.95),
        q99=q(0.99),
        stddev=math.sqrt(var),
    )


def warmup_cutoff(warmup_fraction: float, run_seconds: float) -> float:
    if not 0.0 <= warmup_fraction < 1.0:
        raise ValueError("warmup_fraction must lie in [0, 1)")
    return warmup_fraction * run_seconds


def summarize(h: Histogram, warmup_fraction: float = 0.0, run_seconds: Optional[float] = None) -> MetricsSummary:
    """Nearest-rank summary over samples emitted after the warmup period.

    ``run_seconds`` is the scheduled run length; it defaults to the span of
    seconds present in the histogram.
    """
    if run_seconds is None:
        run_seconds = h.last_second + 1
    cutoff = warmup_cutoff(warmup_fraction, run_seconds)
    shard = h.combined(s for s in h.shards if s >= cutoff)
    if shard.n == 0:
        raise EmptyAfterWarmup(f"no samples after warmup ({warmup_fraction:.0%} of {run_seconds} s)")
    return _summary_of(shard)


@dataclass(frozen=True)
class LatencySample:
    event_latency: int
    proc_latency: int
    bucket: int


@dataclass(frozen=True)
class SeriesRow:
    second: int
    metric: str
    p50: int
    p90: int
    p95: int
    p99: int
    avg: float
    min: int
    max: int


SERIES_HEADER = ["second", "metric", "p50", "p90", "p95", "p99", "avg", "min", "max"]


@dataclass
class QueryMetrics:
    event: Histogram = field(default_factory=Histogram)
    proc: Histogram = field(default_factory=Histogram)


class MetricsRecorder:
    """Turns stamped outputs into latency samples.

    Samples with a negative latency, or a processing-time latency above the
    event-time latency, are clock-misuse anomalies: counted, not recorded.
    """

    def __init__(self, keep_raw: bool = False):
        self.queries: dict[QueryKind, QueryMetrics] = {}
        self.recorded = 0
        self.anomalies = 0
        self.keep_raw = keep_raw
        self.raw: list[np.ndarray] = []

    def record(self, rec) -> Optional[LatencySample]:
        ok = self.record_many(rec.query, [rec.max_event_time], [rec.max_ingest_time], rec.emission_time)
        if not ok:
            return None
        return LatencySample(
            rec.emission_time - rec.max_event_time,
            rec.emission_time - rec.max_ingest_time,
            rec.emission_time // NS_PER_SEC,
        )

    def record_many(self, query, max_event_time, max_ingest_time, emission_time) -> int:
        et = np.asarray(max_event_time, dtype=np.int64)
        it = np.asarray(max_ingest_time, dtype=np.int64)
        em = np.broadcast_to(np.asarray(emission_time, dtype=np.int64), et.shape)
        ev_lat = em - et
        pr_lat = em - it
        good = (ev_lat >= 0) & (pr_lat >= 0) & (pr_lat <= ev_lat)
        n_good = int(good.sum())
        self.recorded += len(et)
        self.anomalies += len(et) - n_good
        if n_good == 0:
            return 0
        if n_good < len(et):
            ev_lat, pr_lat, em = ev_lat[good], pr_lat[good], em[good]
        seconds = em // NS_PER_SEC
        qm = self.queries.setdefault(QueryKind(query), QueryMetrics())
        qm.event.add(ev_lat, seconds)
        qm.proc.add(pr_lat, seconds)
        if self.keep_raw:
            self.raw.append(np.stack([em, ev_lat, pr_lat], axis=1))
        return n_good

    def merged(self) -> QueryMetrics:
        """All queries folded together (a run normally carries one query)."""
        out = QueryMetrics()
        for qm in self.queries.values():
            out.event.merge(qm.event)
            out.proc.merge(qm.proc)
        return out

    def summaries(self, warmup_fraction: float, run_seconds: Optional[float] = None) -> dict[str, MetricsSummary]:
        qm = self.merged()
        return {
            "event": summarize(qm.event, warmup_fraction, run_seconds),
            "proc": summarize(qm.proc, warmup_fraction, run_seconds),
        }

    def time_series(self) -> list[SeriesRow]:
        return time_series(self.merged())


def time_series(qm: QueryMetrics) -> list[SeriesRow]:
    rows = []
    for metric, h in (("event", qm.event), ("proc", qm.proc)):
        for s in sorted(h.shards):
            sm = _summary_of(h.shards[s])
            rows.append(SeriesRow(s, metric, sm.p50, sm.q90, sm.q95, sm.q99, sm.avg, sm.min, sm.max))
    rows.sort(key=lambda r: (r.second, r.metric))
    return rows


def series_to_csv(rows: Sequence[SeriesRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SERIES_HEADER)
    for r in rows:
        w.writerow([r.second, r.metric, r.p50, r.p90, r.p95, r.p99, f"{r.avg:.1f}", r.min, r.max])
    return buf.getvalue()


def series_from_csv(text: str) -> list[SeriesRow]:
    rows = []
    for d in csv.DictReader(io.StringIO(text)):
        rows.append(
            SeriesRow(
                int(d["second"]), d["metric"], int(d["p50"]), int(d["p90"]), int(d["p95"]),
                int(d["p99"]), float(d["avg"]), int(d["min"]), int(d["max"]),
            )
        )
    return rows


def _exact_slope(xs: Sequence[int], ys: Sequence[int]) -> float:
    n = len(xs)
    sx, sy = sum(xs), sum(ys)
    sxx = sum(x * x for x in xs)
    sxy = sum(x * y for x, y in zip(xs, ys))
    den = n * sxx - sx * sx
    if den == 0:
        raise InsufficientData("need at least two distinct seconds")
    return (n * sxy - sx * sy) / den


@dataclass(frozen=True)
class Divergence:
    """Least-squares slopes of per-second median latency, in seconds per second."""

    event_slope: float
    proc_slope: float


def divergence_report(rows: Sequence[SeriesRow], min_seconds: int = 30) -> Divergence:
    ev = {r.second: r.p50 for r in rows if r.metric == "event"}
    pr = {r.second: r.p50 for r in rows if r.metric == "proc"}
    seconds = sorted(set(ev) & set(pr))
    if len(seconds) < min_seconds:
        raise InsufficientData(f"need {min_seconds} s of series, have {len(seconds)}")
    return Divergence(
        event_slope=_exact_slope(seconds, [ev[s] for s in seconds]) / NS_PER_SEC,
        proc_slope=_exact_slope(seconds, [pr[s] for s in seconds]) / NS_PER_SEC,
    )
