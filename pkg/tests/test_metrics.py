import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamgauge.core import NS_PER_MS, NS_PER_SEC
from streamgauge.metrics import (
    EmptyAfterWarmup,
    Histogram,
    InsufficientData,
    MetricsRecorder,
    SeriesRow,
    divergence_report,
    nearest_rank,
    series_from_csv,
    series_to_csv,
    summarize,
)
from streamgauge.protocol import QueryKind

MS = NS_PER_MS


def exact_quantile(values, q):
    s = np.sort(values)
    return int(s[nearest_rank(len(s), q) - 1])


def test_one_to_hundred_ms():
    h = Histogram()
    h.add(np.arange(1, 101) * MS)
    s = summarize(h)
    assert (s.p50, s.q90, s.q95, s.q99) == (50 * MS, 90 * MS, 95 * MS, 99 * MS)
    assert (s.min, s.max, s.n) == (MS, 100 * MS, 100)
    assert s.avg == pytest.approx(50.5 * MS)
    assert s.stddev == pytest.approx(np.arange(1, 101).std() * MS)


def test_nearest_rank():
    assert nearest_rank(100, 0.9) == 90
    assert nearest_rank(10, 0.99) == 10
    assert nearest_rank(1, 0.5) == 1
    assert nearest_rank(3, 0.0) == 1


def test_warmup_excludes_early_seconds():
    h = Histogram()
    for sec in range(10):
        h.add(np.full(10, (sec + 1) * MS), second=sec)
    s = summarize(h, warmup_fraction=0.25, run_seconds=10)
    # cutoff at 2.5 s keeps seconds 3..9
    assert s.n == 70
    assert s.min == 4 * MS
    with pytest.raises(EmptyAfterWarmup):
        summarize(Histogram())


def test_lognormal_quantiles_within_one_ms_of_sort():
    rng = np.random.default_rng(3)
    v = (rng.lognormal(mean=math.log(0.2), sigma=1.0, size=200_000) * NS_PER_SEC).astype(np.int64)
    h = Histogram()
    h.add(v, second=rng.integers(0, 60, size=len(v)))
    s = summarize(h)
    for q, got in ((0.5, s.p50), (0.9, s.q90), (0.95, s.q95), (0.99, s.q99)):
        assert abs(got - exact_quantile(v, q)) <= MS
    assert s.min == v.min() and s.max == v.max()
    assert s.avg == pytest.approx(v.mean(), rel=1e-9)
    assert s.stddev == pytest.approx(v.std(), rel=1e-6)


def test_overflow_bucket_reports_observed_max():
    h = Histogram()
    h.add(np.array([MS] * 98 + [400 * NS_PER_SEC, 500 * NS_PER_SEC]))
    s = summarize(h)
    assert s.q99 == 500 * NS_PER_SEC
    assert s.max == 500 * NS_PER_SEC


@settings(max_examples=40)
@given(st.lists(st.integers(0, 10**10), min_size=1, max_size=300), st.randoms())
def test_summary_is_order_and_shard_insensitive(values, rnd):
    a = Histogram()
    a.add(np.array(values))
    shuffled = list(values)
    rnd.shuffle(shuffled)
    b, c = Histogram(), Histogram()
    half = len(shuffled) // 2
    b.add(np.array(shuffled[:half]), second=0)
    c.add(np.array(shuffled[half:]), second=0)
    sa, sb = summarize(a), summarize(b.merge(c))
    assert (sa.n, sa.min, sa.max, sa.p50, sa.q90, sa.q99) == (sb.n, sb.min, sb.max, sb.p50, sb.q90, sb.q99)
    for q, got in ((0.5, sa.p50), (0.9, sa.q90), (0.99, sa.q99)):
        assert abs(got - exact_quantile(np.array(values), q)) <= MS // 2


def test_recorder_counts_anomalies():
    r = MetricsRecorder()
    # good, negative event latency, processing latency above event latency
    n = r.record_many(QueryKind.AGG, [100, 700, 100], [150, 650, 50], 600)
    assert n == 1
    assert r.anomalies == 2 and r.recorded == 3
    s = r.summaries(0.0)
    assert s["event"].n == 1 and s["event"].max == 500 and s["proc"].max == 450


def test_series_csv_round_trip_and_time_series():
    r = MetricsRecorder()
    for sec in range(3):
        em = sec * NS_PER_SEC + 10 * MS
        r.record_many(QueryKind.AGG, [em - 5 * MS] * 4, [em - 2 * MS] * 4, em)
    rows = r.time_series()
    assert [(x.second, x.metric) for x in rows] == [(s, m) for s in range(3) for m in ("event", "proc")]
    assert all(x.p50 == (5 if x.metric == "event" else 2) * MS for x in rows)
    assert series_from_csv(series_to_csv(rows)) == rows


def rows_with_slopes(n, ev_slope_ns, pr_slope_ns):
    out = []
    for s in range(n):
        out.append(SeriesRow(s, "event", int(1e9 + ev_slope_ns * s), 0, 0, 0, 0.0, 0, 0))
        out.append(SeriesRow(s, "proc", int(5e6 + pr_slope_ns * s), 0, 0, 0, 0.0, 0, 0))
    return out


def test_divergence_slopes():
    d = divergence_report(rows_with_slopes(40, 500_000_000, 0))
    assert d.event_slope == pytest.approx(0.5)
    assert d.proc_slope == 0.0
    rng = np.random.default_rng(1)
    ys = rng.integers(0, 10**9, 50)
    rows = [SeriesRow(s, m, int(y), 0, 0, 0, 0.0, 0, 0) for s, y in enumerate(ys) for m in ("event", "proc")]
    want = np.polyfit(np.arange(50), ys.astype(float), 1)[0] / 1e9
    assert divergence_report(rows).event_slope == pytest.approx(want, rel=1e-9)
    with pytest.raises(InsufficientData):
        divergence_report(rows_with_slopes(10, 1, 1))
