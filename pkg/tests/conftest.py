import numpy as np
import pytest

from streamgauge.core import KeyDistribution
from streamgauge.generator import GeneratorConfig, make_batch


class FixedClock:
    """Clock stub whose ``now()`` is set by the test."""

    def __init__(self, t=0, epoch_ns=0):
        self.t = t
        self.epoch_ns = epoch_ns

    def now(self):
        return self.t

    def to_absolute(self, t):
        return t + self.epoch_ns

    def from_absolute(self, t):
        return t - self.epoch_ns


@pytest.fixture
def fixed_clock():
    return FixedClock()


def dense_keys():
    return KeyDistribution("normal", key_space=100, mean=50, stddev=25)


def sample_batch(n, seed=0, instance=0, start=0, share=1.0, times=None):
    cfg = GeneratorConfig(instances=1, seed=seed, key_dist=dense_keys(), purchases_share=share)
    t = np.arange(start, start + n, dtype=np.int64) if times is None else times
    return make_batch(cfg, instance, start, n, t)


def agg_oracle(events, spec, time_field="event_time", through=None):
    """Per (window start, key): [sum, count, max event time, max ingest time].

    A plain loop over events and ``assign_windows``; windows ending after
    ``through`` are left out.
    """
    from streamgauge.core import Stream, assign_windows

    out = {}
    for e in events.tolist():
        stream, user, gem, price, et, it, _seq = e
        if stream != Stream.PURCHASES:
            continue
        t = et if time_field == "event_time" else it
        for w in assign_windows(t, spec):
            if through is not None and w.end > through:
                continue
            acc = out.setdefault((w.start, gem), [0, 0, et, it])
            acc[0] += price
            acc[1] += 1
            acc[2] = max(acc[2], et)
            acc[3] = max(acc[3], it)
    return out


def join_oracle(events, spec, time_field="event_time", through=None):
    """Nested-loop window join; returns a Counter of
    (user_id, gem_pack_id, price, max_event_time, max_ingest_time).

    Every purchase is compared with every ad of the same window (a broadcast
    equality matrix). Each tuple takes its stream's maximum timestamp over the
    whole window and an output takes the larger of its two tuples' values.
    """
    from collections import Counter

    from streamgauge.core import Stream, assign_windows

    members = {}
    times = events[time_field].tolist()
    for i, t in enumerate(times):
        for w in assign_windows(t, spec):
            if through is None or w.end <= through:
                members.setdefault(w.start, []).append(i)
    out = Counter()
    for idx in members.values():
        win = events[np.array(idx)]
        p = win[win["stream"] == Stream.PURCHASES]
        a = win[win["stream"] == Stream.ADS]
        if len(p) == 0 or len(a) == 0:
            continue
        et = int(max(p["event_time"].max(), a["event_time"].max()))
        it = int(max(p["ingest_time"].max(), a["ingest_time"].max()))
        eq = (p["user_id"][:, None] == a["user_id"][None, :]) & (p["gem_pack_id"][:, None] == a["gem_pack_id"][None, :])
        pi, _ = np.nonzero(eq)
        for row in p[pi].tolist():
            out[(row[1], row[2], row[3], et, it)] += 1
    return out


def run_engine(batches, config, clock=None, keep_outputs=True):
    """Run the reference engine to completion over pre-filled, closed queues."""
    import time

    from streamgauge.core import Clock
    from streamgauge.driver_queue import DriverQueue
    from streamgauge.engine import ReferenceEngine
    from streamgauge.sut import Sink

    clock = clock or Clock(epoch_ns=time.monotonic_ns() - 10**12)
    queues = []
    for i, b in enumerate(batches):
        q = DriverQueue(name=f"q{i}")
        q.offer_batch(b)
        q.close()
        queues.append(q)
    sink = Sink(clock, keep_outputs=keep_outputs)
    report = ReferenceEngine(config, clock).run(queues, sink)
    return sink, report


# -- acceptance summary: one line per criterion, printed after the run --------

_ACCEPTANCE = []


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        name = report.nodeid.split("::")[-1]
        _ACCEPTANCE.append(f"{name}: {'PASS' if report.passed else 'FAIL'} {detail}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
