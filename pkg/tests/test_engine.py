import threading
import time
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import agg_oracle, join_oracle, run_engine, sample_batch
from streamgauge.core import NS_PER_MS, Clock, Event, Stream, WindowId, WindowSpec, batch_from_events
from streamgauge.driver_queue import DriverQueue
from streamgauge.engine import (
    AggOperator,
    DoubleClose,
    EngineConfig,
    JoinOperator,
    ReferenceEngine,
    finalize_join,
)
from streamgauge.protocol import QueryKind
from streamgauge.sut import Sink

MS = NS_PER_MS


def test_ten_minute_window_accumulator():
    spec = WindowSpec.from_ms(600_000, 600_000)
    op = AggOperator(spec)
    for t, price in ((580, 10), (590, 12), (600, 20)):
        op.ingest(Event(Stream.PURCHASES, 1, 7, price, t * MS, 0), now=(t + 1) * MS)
    assert op.open_windows() == [WindowId(0, 600_000 * MS)]
    ((acc,),) = op.close_until(600_000 * MS)
    assert (acc.key, acc.sum_price, acc.count) == (7, 42, 3)
    assert acc.max_event_time == 600 * MS
    assert acc.max_ingest_time == 601 * MS


def test_empty_window_and_double_close():
    op = AggOperator(WindowSpec(10, 5))
    assert op.close_window(WindowId(0, 10)) == []
    with pytest.raises(DoubleClose):
        op.close_window(WindowId(0, 10))


def test_late_events_are_dropped_and_counted():
    op = AggOperator(WindowSpec(10, 10))
    op.ingest_batch(sample_batch(3, times=np.array([1, 2, 15])))
    op.close_until(10)
    op.ingest_batch(sample_batch(1, times=np.array([5])))
    assert op.late_events == 1
    ((acc,),) = op.close_until(20)
    assert acc.count == 1 and acc.max_event_time == 15


def test_ads_do_not_enter_the_aggregate():
    op = AggOperator(WindowSpec(100, 100))
    op.ingest_batch(sample_batch(100, share=0.5, times=np.zeros(100, dtype=np.int64)))
    accs = op.close_until(100)[0]
    assert sum(a.count for a in accs) == 50


@settings(max_examples=30, deadline=None)
@given(cuts=st.lists(st.integers(1, 499), max_size=8, unique=True), slide=st.sampled_from([10, 25, 50]))
def test_agg_state_independent_of_batching(cuts, slide):
    spec = WindowSpec(50, slide)
    b = sample_batch(500, times=np.arange(500, dtype=np.int64) // 2)
    b["ingest_time"] = 0
    whole, parts = AggOperator(spec), AggOperator(spec)
    whole.ingest_batch(b)
    for chunk in np.split(b, sorted(cuts)):
        parts.ingest_batch(chunk)
    assert whole.state == parts.state
    want = agg_oracle(b, spec)
    got = {(w, k): v for w, d in whole.state.items() for k, v in d.items()}
    assert got == want


def test_join_operator_two_step_max():
    spec = WindowSpec(100, 100)
    evs = [
        Event(Stream.PURCHASES, 1, 2, 500, 10, 0, ingest_time=11),
        Event(Stream.ADS, 1, 2, 0, 20, 1, ingest_time=21),
        Event(Stream.ADS, 9, 9, 0, 90, 2, ingest_time=91),  # unmatched, still sets the ads max
        Event(Stream.PURCHASES, 3, 3, 100, 30, 3, ingest_time=31),  # unmatched
    ]
    op = JoinOperator(spec)
    op.ingest_batch(batch_from_events(evs))
    matches, et, it = finalize_join(op.close_until(100))
    assert matches.tolist() == [[1, 2, 500]]
    assert (et, it) == (90, 91)


def test_join_partials_merge_across_partitions():
    spec = WindowSpec(100, 100)
    a, b = JoinOperator(spec), JoinOperator(spec)
    a.ingest_batch(batch_from_events([Event(Stream.PURCHASES, 1, 1, 5, 10, 0, 11), Event(Stream.ADS, 1, 1, 0, 12, 1, 13)]))
    b.ingest_batch(batch_from_events([Event(Stream.ADS, 2, 2, 0, 70, 2, 71)]))
    matches, et, it = finalize_join(a.close_until(100) + b.close_until(100))
    assert matches.tolist() == [[1, 1, 5]]
    assert (et, it) == (70, 71)


@pytest.mark.parametrize("semantics", ["event_time", "processing_time"])
@pytest.mark.parametrize("parallelism", [1, 3])
def test_engine_agg_matches_oracle(semantics, parallelism):
    spec = WindowSpec.from_ms(200, 100, semantics)
    n = 3000
    batches = [sample_batch(n, seed=s, times=np.arange(n, dtype=np.int64) * MS // 3) for s in (1, 2)]
    cfg = EngineConfig(window=spec, parallelism=parallelism, max_batch=128, record_trace=True)
    sink, rep = run_engine(batches, cfg)
    trace = np.concatenate(rep.trace)
    assert len(trace) == 2 * n
    field = "event_time" if semantics == "event_time" else "ingest_time"
    want = agg_oracle(trace, spec, field, through=rep.final_watermark)
    got = {(o.payload[2], o.payload[0]): (o.payload[1], o.max_event_time, o.max_ingest_time) for o in sink.outputs}
    assert len(got) == len(sink.outputs)
    assert got == {k: (v[0], v[2], v[3]) for k, v in want.items()}
    accs = {(a.window.start, a.key): a.count for a in rep.accumulators} if rep.accumulators else None
    assert accs is None or accs == {k: v[1] for k, v in want.items()}


@pytest.mark.parametrize("semantics", ["event_time", "processing_time"])
def test_engine_join_matches_oracle(semantics):
    spec = WindowSpec.from_ms(200, 100, semantics)
    n = 2000
    batches = [
        sample_batch(n, seed=s, share=0.5, times=np.arange(n, dtype=np.int64) * MS // 4) for s in (1, 2)
    ]
    cfg = EngineConfig(query=QueryKind.JOIN, window=spec, parallelism=2, max_batch=100, record_trace=True)
    sink, rep = run_engine(batches, cfg)
    trace = np.concatenate(rep.trace)
    field = "event_time" if semantics == "event_time" else "ingest_time"
    want = join_oracle(trace, spec, field, through=rep.final_watermark)
    got = Counter((*o.payload, o.max_event_time, o.max_ingest_time) for o in sink.outputs)
    assert sum(want.values()) > 0
    assert got == want


def test_service_rate_cap_throttles():
    cap = 20_000
    clock = Clock()
    q = DriverQueue()
    n = 30_000
    q.offer_batch(sample_batch(n, times=np.zeros(n, dtype=np.int64)))
    q.close()
    eng = ReferenceEngine(EngineConfig(service_rate_cap=cap, parallelism=2), clock)
    t0 = time.perf_counter()
    rep = eng.run([q], Sink(clock))
    elapsed = time.perf_counter() - t0
    assert rep.events_processed == n
    assert elapsed == pytest.approx(n / cap, rel=0.15)


def test_stop_aborts_a_running_engine():
    clock = Clock()
    q = DriverQueue()
    eng = ReferenceEngine(EngineConfig(), clock)
    t = threading.Thread(target=lambda: eng.run([q], Sink(clock)))
    t.start()
    time.sleep(0.1)
    eng.stop()
    t.join(2)
    assert not t.is_alive()
    assert eng.report.aborted


def test_engine_config_validation():
    with pytest.raises(ValueError, match="sut.parallelism"):
        EngineConfig(parallelism=0)
    with pytest.raises(ValueError, match="service_rate_cap"):
        EngineConfig(service_rate_cap=0)
