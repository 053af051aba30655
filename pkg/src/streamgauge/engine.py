"""Reference streaming engine: keyed sliding-window SUM and windowed join.

Topology (all threads in one process)::

    source worker per queue --(bounded buffer)--> partition worker per key slice
                                                   --> trigger/sink worker

Sources stamp ingest time, split each pulled batch by key partition and
broadcast their watermark with it. Partitions own disjoint keyed window state,
pay the throttle, and close windows once the watermark (minimum over sources)
passes the window end. The trigger worker turns closed windows into outputs;
for joins it first waits for every partition so it can apply the
window-maximum timestamp rule over the whole window.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Clock, Event, Stream, TimeSemantics, WindowId, WindowSpec, empty_batch, window_starts
from .driver_queue import DriverQueue, QueueClosed
from .pacing import TokenBucket, wait_until
from .protocol import QueryKind

log = logging.getLogger(__name__)

NEG_INF = -(1 << 62)


class DoubleClose(RuntimeError):
    """A window was closed twice; indicates an engine bug."""


@dataclass(frozen=True)
class EngineConfig:
    query: QueryKind = QueryKind.AGG
    window: WindowSpec = field(default_factory=lambda: WindowSpec.from_ms(800, 400))
    service_rate_cap: Optional[float] = None  # events/s over all partitions
    buffer_size: int = 4  # batches per inter-operator channel
    parallelism: int = 2
    max_batch: int = 1024  # events per source pull
    poll_interval_s: float = 0.0005
    record_trace: bool = False

    def __post_init__(self):
        object.__setattr__(self, "query", QueryKind(self.query))
        if self.buffer_size < 1:
            raise ValueError("sut.buffer_size must be >= 1")
        if self.parallelism < 1:
            raise ValueError("sut.parallelism must be >= 1")
        if self.service_rate_cap is not None and self.service_rate_cap <= 0:
            raise ValueError("sut.service_rate_cap must be positive")
        if self.max_batch < 1:
            raise ValueError("sut.max_batch must be >= 1")


@dataclass
class WindowAccumulator:
    window: WindowId
    key: int
    sum_price: int
    count: int
    max_event_time: int
    max_ingest_time: int


@dataclass
class JoinPartial:
    """One partition's share of a closed join window."""

    window: WindowId
    matches: np.ndarray  # (n, 3) int64: user_id, gem_pack_id, price
    max_event_time: dict  # Stream -> int, over this partition's tuples
    max_ingest_time: dict


def _time_field(spec: WindowSpec) -> str:
    return "event_time" if spec.semantics is TimeSemantics.EVENT_TIME else "ingest_time"


class _WindowOperator:
    def __init__(self, spec: WindowSpec):
        self.spec = spec
        self.time_field = _time_field(spec)
        self.closed_through = NEG_INF  # largest window end closed so far
        self.late_events = 0

    def ingest(self, e: Event, now: Optional[int] = None) -> None:
        if e.ingest_time is None:
            if now is None:
                raise ValueError("event has no ingest time; pass now=")
            e.ingest_time = now
        self.ingest_batch(e.to_row())

    def open_windows(self) -> list[WindowId]:
        raise NotImplementedError

    def close_until(self, watermark: int) -> list:
        """Close every open window whose end is <= ``watermark``, oldest first."""
        out = [self.close_window(w) for w in self.open_windows() if w.end <= watermark]
        r, s = self.spec.range_ns, self.spec.slide_ns
        self.closed_through = max(self.closed_through, ((watermark - r) // s) * s + r)
        return out

    def _drop_late(self, starts: np.ndarray) -> np.ndarray:
        ok = starts + self.spec.range_ns > self.closed_through
        self.late_events += int((~ok).sum())
        return ok


class AggOperator(_WindowOperator):
    """``SELECT SUM(price) FROM purchases [range, slide] GROUP BY gem_pack_id``."""

    def __init__(self, spec: WindowSpec):
        super().__init__(spec)
        # window start -> key -> [sum, count, max_et, max_it]
        self.state: dict[int, dict[int, list]] = {}

    def ingest_batch(self, batch: np.ndarray) -> None:
        batch = batch[batch["stream"] == Stream.PURCHASES]
        if len(batch) == 0:
            return
        rows, starts = window_starts(batch[self.time_field], self.spec)
        ok = self._drop_late(starts)
        rows, starts = rows[ok], starts[ok]
        if len(rows) == 0:
            return
        keys = batch["gem_pack_id"][rows]
        order = np.lexsort((keys, starts))
        st, ky = starts[order], keys[order]
        brk = np.flatnonzero((st[1:] != st[:-1]) | (ky[1:] != ky[:-1])) + 1
        idx = np.concatenate(([0], brk))
        sel = rows[order]
        sums = np.add.reduceat(batch["price"][sel], idx)
        counts = np.diff(np.concatenate((idx, [len(sel)])))
        max_et = np.maximum.reduceat(batch["event_time"][sel], idx)
        max_it = np.maximum.reduceat(batch["ingest_time"][sel], idx)
        state = self.state
        for w, k, sm, c, me, mi in zip(
            st[idx].tolist(), ky[idx].tolist(), sums.tolist(), counts.tolist(), max_et.tolist(), max_it.tolist()
        ):
            win = state.get(w)
            if win is None:
                win = state[w] = {}
            acc = win.get(k)
            if acc is None:
                win[k] = [sm, c, me, mi]
            else:
                acc[0] += sm
                acc[1] += c
                if me > acc[2]:
                    acc[2] = me
                if mi > acc[3]:
                    acc[3] = mi

    def open_windows(self) -> list[WindowId]:
        r = self.spec.range_ns
        return [WindowId(s, s + r) for s in sorted(self.state)]

    def close_window(self, w: WindowId) -> list[WindowAccumulator]:
        win = self.state.pop(w.start, None)
        if win is None:
            if w.end <= self.closed_through:
                raise DoubleClose(f"window {w} already closed")
            win = {}
        self.closed_through = max(self.closed_through, w.end)
        return [WindowAccumulator(w, k, a[0], a[1], a[2], a[3]) for k, a in sorted(win.items())]


class JoinOperator(_WindowOperator):
    """Purchases joined with ads on (user_id, gem_pack_id) within shared windows."""

    def __init__(self, spec: WindowSpec):
        super().__init__(spec)
        # window start -> stream -> list of row arrays
        self.state: dict[int, dict[int, list[np.ndarray]]] = {}

    def ingest_batch(self, batch: np.ndarray) -> None:
        if len(batch) == 0:
            return
        rows, starts = window_starts(batch[self.time_field], self.spec)
        ok = self._drop_late(starts)
        rows, starts = rows[ok], starts[ok]
        for w in np.unique(starts).tolist():
            part = batch[rows[starts == w]]
            win = self.state.setdefault(w, {})
            for stream in (Stream.PURCHASES, Stream.ADS):
                sub = part[part["stream"] == stream]
                if len(sub):
                    win.setdefault(int(stream), []).append(sub)

    def open_windows(self) -> list[WindowId]:
        r = self.spec.range_ns
        return [WindowId(s, s + r) for s in sorted(self.state)]

    def close_window(self, w: WindowId) -> JoinPartial:
        win = self.state.pop(w.start, None)
        if win is None:
            if w.end <= self.closed_through:
                raise DoubleClose(f"window {w} already closed")
            win = {}
        self.closed_through = max(self.closed_through, w.end)
        tuples = {s: np.concatenate(win[int(s)]) if int(s) in win else empty_batch(0) for s in Stream}
        max_et = {s: int(t["event_time"].max()) for s, t in tuples.items() if len(t)}
        max_it = {s: int(t["ingest_time"].max()) for s, t in tuples.items() if len(t)}
        p, a = tuples[Stream.PURCHASES], tuples[Stream.ADS]
        if len(p) and len(a):
            ads = Counter(zip(a["user_id"].tolist(), a["gem_pack_id"].tolist()))
            reps = np.fromiter(
                (ads.get(k, 0) for k in zip(p["user_id"].tolist(), p["gem_pack_id"].tolist())),
                dtype=np.int64,
                count=len(p),
            )
            m = np.repeat(p, reps)
            matches = np.stack([m["user_id"], m["gem_pack_id"], m["price"]], axis=1)
        else:
            matches = np.zeros((0, 3), dtype=np.int64)
        return JoinPartial(w, matches, max_et, max_it)


def finalize_join(partials: Sequence[JoinPartial]) -> tuple[np.ndarray, int, int]:
    """Merge partition partials of one window into outputs.

    Every tuple inherits its stream's maximum timestamp over the whole window;
    a join output then carries the larger of its two tuples' inherited times.
    Since every output pairs one purchase with one ad, all outputs of a window
    share the same pair of timestamps.
    """
    matches = np.concatenate([p.matches for p in partials]) if partials else np.zeros((0, 3), dtype=np.int64)
    if len(matches) == 0:
        return matches, NEG_INF, NEG_INF
    et = {s: max(p.max_event_time[s] for p in partials if s in p.max_event_time) for s in Stream}
    it = {s: max(p.max_ingest_time[s] for p in partials if s in p.max_ingest_time) for s in Stream}
    return matches, max(et.values()), max(it.values())


@dataclass
class EngineReport:
    events_processed: int = 0
    windows_closed: int = 0
    final_watermark: int = NEG_INF
    late_events: int = 0
    outputs: int = 0
    aborted: bool = False
    trace: list = field(default_factory=list)  # per source: ingested events, if recorded
    accumulators: list = field(default_factory=list)  # agg only, if recorded


# channel messages
_DATA, _EOS = 0, 1


class ReferenceEngine:
    def __init__(self, config: EngineConfig, clock: Clock):
        self.config = config
        self.clock = clock
        self._stop = threading.Event()
        self.report = EngineReport()

    def stop(self) -> None:
        self._stop.set()

    # -- plumbing ----------------------------------------------------------

    def _put(self, ch: queue.Queue, item) -> bool:
        while True:
            try:
                ch.put(item, timeout=0.05)
                return True
            except queue.Full:
                if self._stop.is_set():
                    return False

    def _get(self, ch: queue.Queue):
        while True:
            try:
                return ch.get(timeout=0.05)
            except queue.Empty:
                if self._stop.is_set():
                    return None

    def _partition_of(self, batch: np.ndarray) -> np.ndarray:
        key = "gem_pack_id" if self.config.query is QueryKind.AGG else "user_id"
        return batch[key] % self.config.parallelism

    # -- workers -----------------------------------------------------------

    def _source(self, sid: int, q: DriverQueue, channels: list[queue.Queue], trace: list) -> None:
        cfg = self.config
        proc_time = cfg.window.semantics is TimeSemantics.PROCESSING_TIME
        P = cfg.parallelism
        wm = last_ingest = NEG_INF
        while not self._stop.is_set():
            try:
                batch = q.take_batch(cfg.max_batch)
            except QueueClosed:
                self._stop.set()
                return
            if len(batch) == 0:
                if q.exhausted:
                    if proc_time:
                        # processing time keeps advancing after the last event:
                        # let it pass the end of every window that event is in
                        if last_ingest > NEG_INF:
                            wait_until(self.clock, last_ingest + cfg.window.range_ns, self._stop)
                        final = self.clock.now()
                    else:
                        final = wm
                    for ch in channels:
                        self._put(ch, (_EOS, sid, None, final))
                    return
                if proc_time:
                    # idle heartbeat: any later event gets a later ingest stamp
                    wm = self.clock.now()
                    for ch in channels:
                        try:
                            ch.put_nowait((_DATA, sid, None, wm))
                        except queue.Full:
                            pass
                time.sleep(cfg.poll_interval_s)
                continue
            now = last_ingest = self.clock.now()
            batch["ingest_time"] = now
            if trace is not None:
                trace.append(batch)
            wm = now if proc_time else max(wm, int(batch["event_time"][-1]))
            if P == 1:
                self._put(channels[0], (_DATA, sid, batch, wm))
                continue
            part = self._partition_of(batch)
            for p, ch in enumerate(channels):
                sub = batch[part == p]
                if not self._put(ch, (_DATA, sid, sub if len(sub) else None, wm)):
                    return

    def _partition(self, pid: int, n_sources: int, ch: queue.Queue, out: queue.Queue) -> None:
        cfg = self.config
        op = AggOperator(cfg.window) if cfg.query is QueryKind.AGG else JoinOperator(cfg.window)
        bucket = None
        if cfg.service_rate_cap is not None:
            bucket = TokenBucket(cfg.service_rate_cap / cfg.parallelism, self.clock)
        r, s = cfg.window.range_ns, cfg.window.slide_ns
        src_wm = [NEG_INF] * n_sources
        done = [False] * n_sources
        reported = NEG_INF
        processed = 0
        while True:
            msg = self._get(ch)
            if msg is None:
                return
            kind, sid, batch, wm = msg
            if batch is not None:
                if bucket is not None and not bucket.acquire(len(batch), self._stop):
                    return
                op.ingest_batch(batch)
                processed += len(batch)
            if kind == _EOS:
                done[sid] = True
            if wm > src_wm[sid]:
                src_wm[sid] = wm
            watermark = min(src_wm)
            finished = all(done)
            next_end = ((reported - r) // s + 1) * s + r
            if watermark >= next_end or finished:
                closed = op.close_until(watermark)
                reported = max(reported, watermark)
                out.put((pid, watermark, closed, finished, processed, op.late_events))
                processed = 0
            if finished:
                return

    def _trigger(self, P: int, out: queue.Queue, sink) -> None:
        cfg = self.config
        rep = self.report
        part_wm = [NEG_INF] * P
        finished = [False] * P
        pending: dict[int, list[JoinPartial]] = {}
        seen: set[int] = set()
        late = [0] * P
        while not all(finished):
            msg = self._get(out)
            if msg is None:
                return
            pid, wm, closed, fin, processed, late_p = msg
            rep.events_processed += processed
            late[pid] = late_p
            part_wm[pid] = wm
            finished[pid] = fin
            if cfg.query is QueryKind.AGG:
                for accs in closed:
                    self._emit_agg(accs, sink)
                    if accs:
                        seen.add(accs[0].window.start)
            else:
                for partial in closed:
                    pending.setdefault(partial.window.start, []).append(partial)
                complete = min(part_wm)
                for start in sorted(pending):
                    if start + cfg.window.range_ns > complete:
                        break
                    self._emit_join(pending.pop(start), sink)
                    seen.add(start)
        rep.final_watermark = min(part_wm)
        rep.windows_closed = len(seen)
        rep.late_events = sum(late)

    def _emit_agg(self, accs: list[WindowAccumulator], sink) -> None:
        if not accs:
            return
        if self.config.record_trace:
            self.report.accumulators.extend(accs)
        payloads = [(a.key, a.sum_price, a.window.start) for a in accs]
        sink.emit_many(
            QueryKind.AGG,
            payloads,
            [a.max_event_time for a in accs],
            [a.max_ingest_time for a in accs],
        )
        self.report.outputs += len(accs)

    def _emit_join(self, partials: list[JoinPartial], sink) -> None:
        matches, et, it = finalize_join(partials)
        if len(matches) == 0:
            return
        sink.emit_many(QueryKind.JOIN, [tuple(m) for m in matches.tolist()], et, it)
        self.report.outputs += len(matches)

    # -- lifecycle ---------------------------------------------------------

    def run(self, queues: Sequence[DriverQueue], sink) -> EngineReport:
        """Process until every queue is exhausted (EOS) or :meth:`stop`.

        On EOS, windows whose end is at or below the final watermark are
        emitted; windows still open beyond it are discarded. Under processing
        time a source waits for the clock to pass the last window of its last
        event before sending EOS, so nothing is discarded.
        """
        cfg = self.config
        P, n = cfg.parallelism, len(queues)
        channels = [queue.Queue(maxsize=cfg.buffer_size) for _ in range(P)]
        out: queue.Queue = queue.Queue()
        traces = [[] if cfg.record_trace else None for _ in range(n)]
        threads = [
            threading.Thread(target=self._source, args=(i, q, channels, traces[i]), name=f"src-{i}", daemon=True)
            for i, q in enumerate(queues)
        ]
        threads += [
            threading.Thread(target=self._partition, args=(p, n, channels[p], out), name=f"part-{p}", daemon=True)
            for p in range(P)
        ]
        for t in threads:
            t.start()
        self._trigger(P, out, sink)
        if self._stop.is_set():
            self.report.aborted = True
        self._stop.set()
        for t in threads:
            t.join()
        if cfg.record_trace:
            self.report.trace = [np.concatenate(t) if t else empty_batch(0) for t in traces]
        return self.report
