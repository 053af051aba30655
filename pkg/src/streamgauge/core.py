"""Domain types shared across the harness: time, events, windows, keys.

All timestamps are integer nanoseconds relative to a per-run epoch held by a
:class:`Clock`. Events travel between components as numpy structured arrays
(``EVENT_DTYPE``); :class:`Event` is the one-row view used at API edges.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

Timestamp = int
NS_PER_SEC = 1_000_000_000
NS_PER_MS = 1_000_000
NO_TIME = -1  # ingest_time placeholder before a SUT source stamps it


class Stream(enum.IntEnum):
    PURCHASES = 0
    ADS = 1


class TimeSemantics(str, enum.Enum):
    EVENT_TIME = "event_time"
    PROCESSING_TIME = "processing_time"


class KeyMode(str, enum.Enum):
    NORMAL = "normal"
    SINGLE_KEY = "single_key"
    UNIFORM = "uniform"


EVENT_DTYPE = np.dtype(
    [
        ("stream", np.int8),
        ("user_id", np.int64),
        ("gem_pack_id", np.int64),
        ("price", np.int64),
        ("event_time", np.int64),
        ("ingest_time", np.int64),
        ("seq", np.int64),
    ]
)


def empty_batch(n: int = 0) -> np.ndarray:
    return np.zeros(n, dtype=EVENT_DTYPE)


class Clock:
    """Monotonic nanosecond clock with a fixed experiment epoch.

    Every component of a single-host run shares one ``Clock`` so event time,
    ingest time and emission time live in the same clock domain.
    """

    def __init__(self, epoch_ns: Optional[int] = None):
        self.epoch_ns = time.monotonic_ns() if epoch_ns is None else epoch_ns

    def now(self) -> Timestamp:
        return time.monotonic_ns() - self.epoch_ns

    def to_absolute(self, t: Timestamp) -> int:
        return t + self.epoch_ns

    def from_absolute(self, t: int) -> Timestamp:
        return t - self.epoch_ns


@dataclass(slots=True)
class Event:
    stream: Stream
    user_id: int
    gem_pack_id: int
    price: int  # cents
    event_time: Timestamp
    seq: int
    ingest_time: Optional[Timestamp] = None

    def __post_init__(self):
        if self.price < 0:
            raise ValueError("price must be non-negative")
        if self.stream == Stream.ADS and self.price != 0:
            raise ValueError("ads events carry price 0")

    def to_row(self) -> np.ndarray:
        row = empty_batch(1)
        row[0] = (
            int(self.stream),
            self.user_id,
            self.gem_pack_id,
            self.price,
            self.event_time,
            NO_TIME if self.ingest_time is None else self.ingest_time,
            self.seq,
        )
        return row

    @classmethod
    def from_row(cls, row) -> "Event":
        ingest = int(row["ingest_time"])
        return cls(
            stream=Stream(int(row["stream"])),
            user_id=int(row["user_id"]),
            gem_pack_id=int(row["gem_pack_id"]),
            price=int(row["price"]),
            event_time=int(row["event_time"]),
            seq=int(row["seq"]),
            ingest_time=None if ingest == NO_TIME else ingest,
        )


def batch_from_events(events) -> np.ndarray:
    events = list(events)
    out = empty_batch(len(events))
    for i, e in enumerate(events):
        out[i] = e.to_row()[0]
    return out


def events_from_batch(batch: np.ndarray) -> list[Event]:
    return [Event.from_row(r) for r in batch]


# ---------------------------------------------------------------------------
# windows


@dataclass(frozen=True)
class WindowSpec:
    range_ns: int
    slide_ns: int
    semantics: TimeSemantics = TimeSemantics.EVENT_TIME

    def __post_init__(self):
        if self.range_ns <= 0:
            raise ValueError("window.range must be positive")
        if self.slide_ns <= 0:
            raise ValueError("window.slide must be positive")
        if self.slide_ns > self.range_ns:
            raise ValueError("window.slide must not exceed window.range")
        object.__setattr__(self, "semantics", TimeSemantics(self.semantics))

    @classmethod
    def from_ms(cls, range_ms: float, slide_ms: float, semantics="event_time") -> "WindowSpec":
        return cls(int(round(range_ms * NS_PER_MS)), int(round(slide_ms * NS_PER_MS)), TimeSemantics(semantics))

    @property
    def max_windows(self) -> int:
        return -(-self.range_ns // self.slide_ns)


class WindowId(NamedTuple):
    start: int
    end: int


def assign_windows(t: Timestamp, spec: WindowSpec) -> list[WindowId]:
    """All origin-aligned windows ``[start, start + range)`` containing ``t``.

    Starts are multiples of the slide and may be negative. When the slide
    divides the range the result always has ``range / slide`` entries;
    otherwise it alternates between floor and ceil of that ratio.
    """
    r, s = spec.range_ns, spec.slide_ns
    last = (t // s) * s
    first = last - ((last - t + r - 1) // s) * s  # smallest aligned start > t - r
    return [WindowId(st, st + r) for st in range(first, last + 1, s)]


def window_starts(times: np.ndarray, spec: WindowSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``assign_windows``: returns (row index, window start) pairs."""
    times = np.asarray(times, dtype=np.int64)
    r, s = spec.range_ns, spec.slide_ns
    last = (times // s) * s
    rows, starts = [], []
    idx = np.arange(len(times))
    for j in range(spec.max_windows):
        st = last - j * s
        ok = st > times - r
        rows.append(idx[ok])
        starts.append(st[ok])
    if not rows:
        return idx[:0], times[:0]
    return np.concatenate(rows), np.concatenate(starts)


# ---------------------------------------------------------------------------
# keys

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _stream_key(seed: int, lane: int) -> np.uint64:
    base = np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    mixed = _splitmix64(_splitmix64(base) ^ np.uint64(lane & 0xFFFFFFFFFFFFFFFF))
    return mixed[0]


def uniform01(seqs: np.ndarray, seed: int, lane: int) -> np.ndarray:
    """Counter-based uniforms in [0, 1): a pure function of (seq, seed, lane)."""
    seqs = np.asarray(seqs).astype(np.uint64)
    with np.errstate(over="ignore"):
        h = _splitmix64(seqs * np.uint64(0xD1342543DE82EF95) ^ _stream_key(seed, lane))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


@dataclass(frozen=True)
class KeyDistribution:
    mode: KeyMode = KeyMode.NORMAL
    key_space: int = 1000
    mean: float = 500.0
    stddev: float = 100.0
    fixed_key: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", KeyMode(self.mode))
        if self.key_space <= 0:
            raise ValueError("key_dist.key_space must be positive")
        if self.mode is KeyMode.NORMAL and self.stddev < 0:
            raise ValueError("key_dist.stddev must be non-negative")
        if self.mode is KeyMode.SINGLE_KEY and not 0 <= self.fixed_key < self.key_space:
            raise ValueError("key_dist.fixed_key must lie in [0, key_space)")


def draw_keys(seqs: np.ndarray, dist: KeyDistribution, seed: int, lane: int = 0) -> np.ndarray:
    """Vectorised key draw; each key depends only on (seq, dist, seed, lane)."""
    seqs = np.asarray(seqs)
    if dist.mode is KeyMode.SINGLE_KEY:
        return np.full(seqs.shape, dist.fixed_key, dtype=np.int64)
    if dist.mode is KeyMode.UNIFORM:
        u = uniform01(seqs, seed, 2 * lane)
        return np.minimum((u * dist.key_space).astype(np.int64), dist.key_space - 1)
    # Box-Muller on two independent counter lanes, then clamp
    u1 = uniform01(seqs, seed, 2 * lane)
    u2 = uniform01(seqs, seed, 2 * lane + 1)
    z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * math.pi * u2)
    k = np.rint(dist.mean + dist.stddev * z)
    return np.clip(k, 0, dist.key_space - 1).astype(np.int64)


def draw_key(seq: int, dist: KeyDistribution, seed: int, lane: int = 0) -> int:
    return int(draw_keys(np.array([seq]), dist, seed, lane)[0])
