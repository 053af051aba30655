"""Metered in-memory queue between one generator instance and one SUT source.

The queue never blocks the producer: overload shows up as depth growth, which
is exactly what the sustainability verdict looks at. Throughput is measured
here, on the driver side, as the per-second delta of ``taken_total``.

Single producer, single consumer. Producer-side state (``offered_total``,
appends to the chunk deque) and consumer-side state (``taken_total``, head
offset, pops) are disjoint, and deque append/popleft are atomic, so no lock
is needed between the two threads.
"""

from __future__ import annotations

import csv
import enum
import io
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import NS_PER_SEC, Clock, Event, empty_batch

DEFAULT_HARD_CAP = 100_000_000


class QueueState(enum.Enum):
    OPEN = "open"
    CLOSED = "closed"  # producer finished; consumer may drain
    DROPPED = "dropped"  # consumer went away


class QueueClosed(RuntimeError):
    """Raised on offer to a queue whose SUT connection was dropped."""


class DepthCapExceeded(QueueClosed):
    """Depth passed the hard memory cap; the run is aborted as unsustainable."""


class DriverQueue:
    def __init__(self, capacity_soft: int = 1_000_000, hard_cap: int = DEFAULT_HARD_CAP, name: str = "q0"):
        self.name = name
        self.capacity_soft = capacity_soft
        self.hard_cap = hard_cap
        self.state = QueueState.OPEN
        self.offered_total = 0
        self.taken_total = 0
        self.high_watermark = False
        self.cap_exceeded = False
        self._chunks: deque[np.ndarray] = deque()
        self._head_off = 0

    @property
    def depth(self) -> int:
        # read taken first: a concurrent take can only make the result an overestimate
        taken = self.taken_total
        return self.offered_total - taken

    @property
    def exhausted(self) -> bool:
        return self.state is QueueState.CLOSED and self.depth == 0

    # -- producer side -----------------------------------------------------

    def offer(self, e: Event) -> bool:
        return self.offer_batch(e.to_row())

    def offer_batch(self, batch: np.ndarray) -> bool:
        if self.state is QueueState.DROPPED:
            raise QueueClosed(f"{self.name}: SUT connection dropped")
        if self.state is QueueState.CLOSED:
            raise QueueClosed(f"{self.name}: queue closed by producer")
        n = len(batch)
        if n == 0:
            return True
        self._chunks.append(batch)
        self.offered_total += n
        depth = self.depth
        if depth > self.capacity_soft:
            self.high_watermark = True
        if depth > self.hard_cap:
            self.cap_exceeded = True
            raise DepthCapExceeded(f"{self.name}: depth {depth} exceeds hard cap {self.hard_cap}")
        return True

    def close(self) -> None:
        """End of stream from the producer; remaining events stay takeable."""
        if self.state is QueueState.OPEN:
            self.state = QueueState.CLOSED

    # -- consumer side -----------------------------------------------------

    def take_batch(self, max_n: int) -> np.ndarray:
        """Up to ``max_n`` events in FIFO order as an ``EVENT_DTYPE`` array.

        Returns an empty array when nothing is queued.
        """
        if self.state is QueueState.DROPPED:
            raise QueueClosed(f"{self.name}: SUT connection dropped")
        parts = []
        need = max_n
        chunks = self._chunks
        while need > 0 and chunks:
            head = chunks[0]
            avail = len(head) - self._head_off
            if avail <= need:
                parts.append(head[self._head_off:])
                chunks.popleft()
                self._head_off = 0
                need -= avail
            else:
                parts.append(head[self._head_off:self._head_off + need])
                self._head_off += need
                need = 0
        if not parts:
            return empty_batch(0)
        out = parts[0].copy() if len(parts) == 1 else np.concatenate(parts)
        self.taken_total += len(out)
        return out

    def drop(self) -> None:
        """Mark the SUT side as disconnected; further offers raise."""
        self.state = QueueState.DROPPED


@dataclass
class QueueTelemetry:
    """Per-second samples of one queue (or of the sum over queues)."""

    seconds: list[int] = field(default_factory=list)
    depth: list[int] = field(default_factory=list)
    offer_rate: list[float] = field(default_factory=list)
    take_rate: list[float] = field(default_factory=list)
    high_watermark: bool = False

    def append(self, second: int, depth: int, offer_rate: float, take_rate: float) -> None:
        if self.seconds and second <= self.seconds[-1]:
            raise ValueError("telemetry seconds must be strictly increasing")
        self.seconds.append(second)
        self.depth.append(depth)
        self.offer_rate.append(offer_rate)
        self.take_rate.append(take_rate)

    def __len__(self) -> int:
        return len(self.seconds)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["second", "depth", "offer_rate", "take_rate"])
        for row in zip(self.seconds, self.depth, self.offer_rate, self.take_rate):
            w.writerow([row[0], row[1], f"{row[2]:.1f}", f"{row[3]:.1f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "QueueTelemetry":
        t = cls()
        for row in csv.DictReader(io.StringIO(text)):
            t.append(int(row["second"]), int(row["depth"]), float(row["offer_rate"]), float(row["take_rate"]))
        return t

    @staticmethod
    def total(parts: Sequence["QueueTelemetry"]) -> "QueueTelemetry":
        out = QueueTelemetry(high_watermark=any(p.high_watermark for p in parts))
        n = min((len(p) for p in parts), default=0)
        for i in range(n):
            out.append(
                parts[0].seconds[i],
                sum(p.depth[i] for p in parts),
                sum(p.offer_rate[i] for p in parts),
                sum(p.take_rate[i] for p in parts),
            )
        return out


class TelemetrySampler:
    """Observer thread sampling every queue on a 1 s cadence.

    Sample k is taken at ``start + (k + 1) s`` and covers the preceding second;
    rates are counter deltas divided by the measured interval.
    """

    def __init__(self, queues: Sequence[DriverQueue], clock: Clock, interval_ns: int = NS_PER_SEC):
        self.queues = list(queues)
        self.clock = clock
        self.interval_ns = interval_ns
        self.series = [QueueTelemetry() for _ in self.queues]
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._start_ns = 0

    def start(self, start_ns: Optional[int] = None) -> "TelemetrySampler":
        self._start_ns = self.clock.now() if start_ns is None else start_ns
        self._thread = threading.Thread(target=self._loop, name="telemetry", daemon=True)
        self._thread.start()
        return self

    def _loop(self) -> None:
        prev = [(q.offered_total, q.taken_total) for q in self.queues]
        prev_t = self._start_ns
        k = 0
        while not self._stop.is_set():
            deadline = self._start_ns + (k + 1) * self.interval_ns
            delay = (deadline - self.clock.now()) / NS_PER_SEC
            if delay > 0 and self._stop.wait(delay):
                break
            prev, prev_t = self.sample(k, prev, prev_t)
            k += 1

    def sample(self, k: int, prev, prev_t: int):
        now = self.clock.now()
        dt = max(now - prev_t, 1) / NS_PER_SEC
        current = []
        for q, series, (po, pt) in zip(self.queues, self.series, prev):
            taken = q.taken_total
            offered = q.offered_total
            series.append(k, offered - taken, (offered - po) / dt, (taken - pt) / dt)
            series.high_watermark = series.high_watermark or q.high_watermark
            current.append((offered, taken))
        return current, now

    def stop(self) -> list[QueueTelemetry]:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        return self.series

    def total(self) -> QueueTelemetry:
        return QueueTelemetry.total(self.series)
