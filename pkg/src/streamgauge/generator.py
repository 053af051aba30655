"""Seeded constant-rate event generator, one worker thread per instance.

Event payloads (stream, keys, price) are a pure function of
``(seed, instance_id, seq)``; only ``event_time`` depends on when the event is
actually emitted. Each instance feeds exactly one :class:`DriverQueue`.
"""

from __future__ import annotations

import enum
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    NO_TIME,
    NS_PER_MS,
    NS_PER_SEC,
    Clock,
    KeyDistribution,
    Stream,
    draw_keys,
    empty_batch,
    uniform01,
)
from .driver_queue import DriverQueue, QueueClosed
from .pacing import wait_until

log = logging.getLogger(__name__)

# hash lanes; instance id is folded into the seed
LANE_USER = 0
LANE_GEM = 1
LANE_PRICE = 2

TICK_NS = NS_PER_MS


class Timestamping(str, enum.Enum):
    WALL = "wall"  # actual emission instant
    SCHEDULED = "scheduled"  # the instant the pacing schedule assigns to the event


@dataclass(frozen=True)
class GeneratorConfig:
    instances: int = 2
    rate_per_instance: float = 5_000.0
    total_events: int = 100_000
    seed: int = 0
    key_dist: KeyDistribution = field(default_factory=KeyDistribution)
    price_min: int = 1  # cents
    price_max: int = 10_000
    # share of purchases; the rest are ads
    purchases_share: float = 1.0
    timestamping: Timestamping = Timestamping.WALL

    def __post_init__(self):
        object.__setattr__(self, "timestamping", Timestamping(self.timestamping))
        if self.instances <= 0:
            raise ValueError("generator.instances must be positive")
        if self.rate_per_instance <= 0:
            raise ValueError("generator.rate_per_instance must be positive")
        if self.total_events <= 0:
            raise ValueError("generator.total_events must be positive")
        if not 0 <= self.price_min <= self.price_max:
            raise ValueError("generator.price: need 0 <= min <= max")
        if not 0.0 <= self.purchases_share <= 1.0:
            raise ValueError("generator.purchases_share must lie in [0, 1]")

    @property
    def total_rate(self) -> float:
        return self.instances * self.rate_per_instance

    def instance_seed(self, instance: int) -> int:
        return (self.seed * 1_000_003 + instance) & 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class RateSchedule:
    """Piecewise-constant aggregate rate: ``segments`` of (seconds, events/s)."""

    segments: tuple[tuple[float, float], ...]

    def __post_init__(self):
        segs = tuple((float(d), float(r)) for d, r in self.segments)
        if not segs:
            raise ValueError("schedule must have at least one segment")
        for d, r in segs:
            if d <= 0 or r <= 0:
                raise ValueError("schedule durations and rates must be positive")
        object.__setattr__(self, "segments", segs)

    @classmethod
    def constant(cls, rate: float, seconds: float) -> "RateSchedule":
        return cls(((seconds, rate),))

    @property
    def duration(self) -> float:
        return sum(d for d, _ in self.segments)

    @property
    def peak_rate(self) -> float:
        return max(r for _, r in self.segments)

    def scaled(self, factor: float) -> "RateSchedule":
        return RateSchedule(tuple((d, r * factor) for d, r in self.segments))

    def cumulative(self, t_sec: float) -> float:
        """Events due by ``t_sec`` seconds into the schedule."""
        total = 0.0
        for d, r in self.segments:
            if t_sec <= d:
                return total + r * max(t_sec, 0.0)
            total += r * d
            t_sec -= d
        return total

    def rate_at(self, t_sec: float) -> float:
        for d, r in self.segments:
            if t_sec < d:
                return r
            t_sec -= d
        return self.segments[-1][1]

    def total_events(self) -> int:
        return int(self.cumulative(self.duration) + 1e-6)


@dataclass
class GenerationReport:
    events_emitted: int
    wall_time: float
    max_pacing_error: float
    per_second: list[int] = field(default_factory=list)
    cancelled: bool = False
    error: Optional[BaseException] = None


def make_batch(config: GeneratorConfig, instance: int, seq_start: int, n: int, event_time) -> np.ndarray:
    """Events ``seq_start .. seq_start + n - 1`` of one instance.

    ``event_time`` is a scalar or a length-n array of timestamps.
    """
    seqs = np.arange(seq_start, seq_start + n, dtype=np.int64)
    seed = config.instance_seed(instance)
    out = empty_batch(n)
    # exact share via a Bresenham stride: seq is a purchase iff floor((seq+1)*share) steps
    share = config.purchases_share
    purchases = np.floor((seqs + 1) * share + 1e-9) > np.floor(seqs * share + 1e-9)
    out["stream"] = np.where(purchases, int(Stream.PURCHASES), int(Stream.ADS))
    out["user_id"] = draw_keys(seqs, config.key_dist, seed, LANE_USER)
    out["gem_pack_id"] = draw_keys(seqs, config.key_dist, seed, LANE_GEM)
    span = config.price_max - config.price_min + 1
    price = config.price_min + np.minimum((uniform01(seqs, seed, 2 * LANE_PRICE) * span).astype(np.int64), span - 1)
    out["price"] = np.where(purchases, price, 0)
    out["event_time"] = event_time
    out["ingest_time"] = NO_TIME
    out["seq"] = seqs
    return out


class Generator:
    """Drives ``config.instances`` paced workers, each into its own queue."""

    def __init__(
        self,
        config: GeneratorConfig,
        schedule: RateSchedule,
        queues: Sequence[DriverQueue],
        clock: Clock,
        cancel: Optional[threading.Event] = None,
    ):
        if len(queues) != config.instances:
            raise ValueError("one queue per generator instance is required")
        self.config = config
        self.schedule = schedule
        self.queues = list(queues)
        self.clock = clock
        self.cancel = cancel or threading.Event()
        self._n = config.instances
        self._counts: list[dict[int, int]] = [dict() for _ in range(self._n)]
        self._emitted = [0] * self._n
        self._errors: list[BaseException] = []
        self._threads: list[threading.Thread] = []
        self.start_ns = 0

    def _due(self, instance: int, elapsed_ns: int) -> int:
        # instance i gets events k*n + i of the aggregate schedule
        total = int(self.schedule.cumulative(elapsed_ns / NS_PER_SEC) + 1e-6)
        return max(0, (total - instance + self._n - 1) // self._n)

    def _worker(self, instance: int) -> None:
        q = self.queues[instance]
        counts = self._counts[instance]
        end_ns = int(self.schedule.duration * NS_PER_SEC)
        total_due = self._due(instance, end_ns)
        sent = 0
        tick = 0
        scheduled = self.config.timestamping is Timestamping.SCHEDULED
        try:
            while sent < total_due:
                if self.cancel.is_set():
                    return
                now = self.clock.now()
                elapsed = min(now - self.start_ns, end_ns)
                due = self._due(instance, elapsed)
                n = due - sent
                if n > 0:
                    if scheduled:
                        ts = self._scheduled_times(instance, sent, n)
                    else:
                        ts = now
                    q.offer_batch(make_batch(self.config, instance, sent, n, ts))
                    sec = (now - self.start_ns) // NS_PER_SEC
                    counts[sec] = counts.get(sec, 0) + n
                    sent = due
                    self._emitted[instance] = sent
                tick += 1
                target = self.start_ns + max(tick * TICK_NS, elapsed + TICK_NS)
                wait_until(self.clock, min(target, self.start_ns + end_ns), self.cancel)
        except QueueClosed as exc:
            self._errors.append(exc)
            self.cancel.set()

    def _scheduled_times(self, instance: int, seq_start: int, n: int) -> np.ndarray:
        # invert the cumulative schedule for aggregate indices k*n_inst + instance
        idx = (np.arange(seq_start, seq_start + n) * self._n + instance + 1).astype(np.float64)
        out = np.empty(n, dtype=np.int64)
        base_t, base_c = 0.0, 0.0
        bounds = []
        for d, r in self.schedule.segments:
            bounds.append((base_c, base_c + r * d, base_t, r))
            base_c += r * d
            base_t += d
        for lo, hi, t0, r in bounds:
            m = (idx > lo) & (idx <= hi + 1e-6)
            out[m] = self.start_ns + ((t0 + (idx[m] - lo) / r) * NS_PER_SEC).astype(np.int64)
        return out

    def start(self, start_ns: Optional[int] = None) -> "Generator":
        """Start every instance; the schedule begins at ``start_ns`` (default now)."""
        self.start_ns = self.clock.now() if start_ns is None else start_ns
        self._t0 = time.perf_counter()
        for i in range(self._n):
            t = threading.Thread(target=self._worker, args=(i,), name=f"gen-{i}", daemon=True)
            self._threads.append(t)
            t.start()
        return self

    def join(self, close_queues: bool = True) -> GenerationReport:
        for t in self._threads:
            t.join()
        if close_queues:
            for q in self.queues:
                q.close()
        return self.report()

    @property
    def events_emitted(self) -> int:
        return sum(self._emitted)

    def report(self) -> GenerationReport:
        wall = time.perf_counter() - self._t0
        per_second: dict[int, int] = {}
        for c in self._counts:
            for s, n in c.items():
                per_second[s] = per_second.get(s, 0) + n
        seconds = sorted(per_second)
        series = [per_second.get(s, 0) for s in range(seconds[-1] + 1)] if seconds else []
        return GenerationReport(
            events_emitted=self.events_emitted,
            wall_time=wall,
            max_pacing_error=pacing_error(series, self.schedule),
            per_second=series,
            cancelled=self.cancel.is_set(),
            error=self._errors[0] if self._errors else None,
        )


def pacing_error(per_second: Sequence[int], schedule: RateSchedule) -> float:
    """Largest relative deviation of a full second's count from the schedule."""
    worst = 0.0
    for s, n in enumerate(per_second):
        if s + 1 > schedule.duration + 1e-9:
            break
        expected = schedule.cumulative(s + 1) - schedule.cumulative(s)
        if expected > 0:
            worst = max(worst, abs(n - expected) / expected)
    return worst


def generate(
    config: GeneratorConfig,
    schedule: Optional[RateSchedule],
    queues: Sequence[DriverQueue],
    clock: Optional[Clock] = None,
    cancel: Optional[threading.Event] = None,
) -> GenerationReport:
    """Run the schedule to completion (or cancellation) and close the queues.

    Without a schedule the generator runs ``total_events`` at the configured
    constant rate. A dropped queue stops every instance and re-raises
    :class:`QueueClosed`.
    """
    if schedule is None:
        schedule = RateSchedule.constant(config.total_rate, config.total_events / config.total_rate)
    gen = Generator(config, schedule, queues, clock or Clock(), cancel).start()
    report = gen.join()
    if report.error is not None:
        raise report.error
    return report


class _NullSink:
    def __init__(self):
        self.count = 0

    def offer_batch(self, batch) -> bool:
        self.count += len(batch)
        return True


def calibrate(config: GeneratorConfig, seconds: float = 5.0, batch: int = 1000) -> float:
    """Sustained generation rate (events/s) into a null sink.

    Uses the same batch construction as a paced run at 1 ms ticks, cycling
    over instances, for at least ``seconds`` of wall time.
    """
    sink = _NullSink()
    seqs = [0] * config.instances
    t0 = time.perf_counter()
    deadline = t0 + seconds
    i = 0
    while True:
        inst = i % config.instances
        sink.offer_batch(make_batch(config, inst, seqs[inst], batch, 0))
        seqs[inst] += batch
        i += 1
        now = time.perf_counter()
        if now >= deadline:
            break
    rate = sink.count / (now - t0)
    log.info("generator calibrated at %.0f events/s", rate)
    return rate
