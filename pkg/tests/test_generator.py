import threading
import time

import numpy as np
import pytest

from conftest import dense_keys
from streamgauge.core import Clock, Stream
from streamgauge.driver_queue import DriverQueue, QueueClosed
from streamgauge.generator import (
    GeneratorConfig,
    RateSchedule,
    calibrate,
    generate,
    make_batch,
    pacing_error,
)


def drain(queues):
    return [q.take_batch(10**9) for q in queues]


def cfg(**kw):
    base = dict(instances=2, seed=1, key_dist=dense_keys())
    base.update(kw)
    return GeneratorConfig(**base)


def test_emits_exact_count_across_instances():
    c = cfg(instances=3)
    sched = RateSchedule.constant(30_001, 0.5)
    qs = [DriverQueue() for _ in range(3)]
    rep = generate(c, sched, qs)
    per_q = [len(b) for b in drain(qs)]
    assert sum(per_q) == rep.events_emitted == sched.total_events() == 15_000
    assert max(per_q) - min(per_q) <= 1
    assert all(q.exhausted for q in qs)


def test_payloads_deterministic_given_seed():
    sched = RateSchedule.constant(20_000, 0.3)
    runs = []
    for _ in range(2):
        qs = [DriverQueue() for _ in range(2)]
        generate(cfg(), sched, qs)
        runs.append(drain(qs))
    for a, b in zip(*runs):
        for f in ("stream", "user_id", "gem_pack_id", "price", "seq"):
            assert np.array_equal(a[f], b[f])
    other = [DriverQueue() for _ in range(2)]
    generate(cfg(seed=2), sched, other)
    assert not np.array_equal(drain(other)[0]["user_id"], runs[0][0]["user_id"])


def test_scheduled_timestamps_are_reproducible_offsets():
    sched = RateSchedule.constant(10_000, 0.2)
    offsets = []
    for _ in range(2):
        clock = Clock()
        qs = [DriverQueue() for _ in range(2)]
        generate(cfg(timestamping="scheduled"), sched, qs, clock)
        b = drain(qs)[0]
        offsets.append(b["event_time"] - b["event_time"][0])
    assert np.array_equal(offsets[0], offsets[1])
    # instance 0 carries aggregate events 0, 2, 4 ... spaced 2/rate apart
    assert np.all(np.diff(offsets[0]) == pytest.approx(200_000, abs=1))


def test_event_times_are_monotone_per_queue():
    qs = [DriverQueue() for _ in range(2)]
    generate(cfg(), RateSchedule.constant(50_000, 0.3), qs)
    for b in drain(qs):
        assert np.all(np.diff(b["event_time"]) >= 0)


def test_purchases_share_is_exact():
    c = cfg(purchases_share=0.25)
    b = make_batch(c, 0, 0, 1000, 0)
    assert (b["stream"] == Stream.PURCHASES).sum() == 250
    assert np.all(b["price"][b["stream"] == Stream.ADS] == 0)
    p = b["price"][b["stream"] == Stream.PURCHASES]
    assert p.min() >= c.price_min and p.max() <= c.price_max


def test_three_step_profile_tracks_schedule():
    # fluctuating profile scaled down: 8.4k -> 2.8k -> 8.4k events/s, 1 s steps
    sched = RateSchedule(((1.0, 8400.0), (1.0, 2800.0), (1.0, 8400.0)))
    qs = [DriverQueue() for _ in range(2)]
    rep = generate(cfg(), sched, qs)
    assert rep.events_emitted == 19_600
    assert rep.per_second[:3] == pytest.approx([8400, 2800, 8400], rel=0.05)
    assert rep.max_pacing_error < 0.05


def test_rate_schedule_arithmetic():
    s = RateSchedule(((2.0, 100.0), (1.0, 50.0)))
    assert s.duration == 3.0
    assert s.cumulative(1.0) == 100.0
    assert s.cumulative(2.5) == 225.0
    assert s.total_events() == 250
    assert s.rate_at(2.1) == 50.0
    assert s.scaled(2).peak_rate == 200.0
    assert pacing_error([100, 100, 50], s) == 0.0
    assert pacing_error([100, 90, 50], s) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        RateSchedule(((1.0, 0.0),))


def test_cancellation_stops_early():
    cancel = threading.Event()
    qs = [DriverQueue() for _ in range(2)]
    threading.Timer(0.2, cancel.set).start()
    t0 = time.perf_counter()
    rep = generate(cfg(), RateSchedule.constant(1000, 30), qs, cancel=cancel)
    assert time.perf_counter() - t0 < 1.0
    assert rep.cancelled
    assert rep.events_emitted < 1000


def test_dropped_queue_propagates():
    qs = [DriverQueue() for _ in range(2)]
    threading.Timer(0.1, qs[1].drop).start()
    with pytest.raises(QueueClosed):
        generate(cfg(), RateSchedule.constant(1000, 5), qs)


def test_calibrate_is_stable():
    a = calibrate(cfg(), seconds=0.5)
    b = calibrate(cfg(), seconds=0.5)
    assert a > 100_000
    assert abs(a - b) / max(a, b) < 0.5


def test_config_validation():
    with pytest.raises(ValueError, match="generator.instances"):
        GeneratorConfig(instances=0)
    with pytest.raises(ValueError, match="purchases_share"):
        GeneratorConfig(purchases_share=1.5)
