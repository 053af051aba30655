"""Run orchestration: probes, sustainability verdicts, MST search, suites."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Clock, KeyDistribution, KeyMode
from .driver_queue import (
    DEFAULT_HARD_CAP,
    DepthCapExceeded,
    DriverQueue,
    QueueClosed,
    QueueTelemetry,
    TelemetrySampler,
)
from .engine import EngineConfig, EngineReport
from .generator import GenerationReport, Generator, GeneratorConfig, RateSchedule, calibrate
from .metrics import EmptyAfterWarmup, MetricsRecorder, MetricsSummary, SeriesRow
from .sut import Sink, SutDescriptor, connect

log = logging.getLogger(__name__)


class Reason(str, enum.Enum):
    OK = "ok"
    QUEUE_GROWTH = "queue_growth"
    DEPTH_CAP = "depth_cap"
    CONNECTION_DROP = "connection_drop"
    GENERATOR_BOUND = "generator_bound"


class GeneratorBound(RuntimeError):
    """The requested rate exceeds what the generator can produce."""


class NothingSustainable(RuntimeError):
    def __init__(self, msg: str, probes=()):
        super().__init__(msg)
        self.probes = list(probes)


class ConnectionDropped(RuntimeError):
    """The SUT dropped its connection during a probe; the search halts."""

    def __init__(self, rate: float, probes=()):
        super().__init__(f"SUT dropped the connection while probing {rate:.0f} ev/s")
        self.probes = list(probes)


class NonMonotoneSUT(RuntimeError):
    def __init__(self, sustainable, unsustainable):
        super().__init__(
            f"rate {sustainable[0]:.0f} was sustainable but lower rate {unsustainable[0]:.0f} was not"
        )
        self.sustainable = sustainable
        self.unsustainable = unsustainable


@dataclass(frozen=True)
class SustainabilityPolicy:
    """Thresholds for calling an offered rate sustainable.

    Depth cap and growth slope default to values relative to the probed rate
    (5 s of events and 1 % of the rate per second); the absolute fields
    override them when set.
    """

    max_queue_seconds: float = 5.0
    growth_slope_fraction: float = 0.01
    observation_fraction: float = 0.5
    min_run: float = 30.0
    max_queue_depth: Optional[int] = None
    growth_slope_epsilon: Optional[float] = None

    def __post_init__(self):
        for name in ("max_queue_seconds", "growth_slope_fraction", "observation_fraction", "min_run"):
            if getattr(self, name) <= 0:
                raise ValueError(f"policy.{name} must be positive")
        if self.observation_fraction > 1:
            raise ValueError("policy.observation_fraction must be <= 1")
        if self.max_queue_depth is not None and self.max_queue_depth <= 0:
            raise ValueError("policy.max_queue_depth must be positive")
        if self.growth_slope_epsilon is not None and self.growth_slope_epsilon <= 0:
            raise ValueError("policy.growth_slope_epsilon must be positive")

    def q_max(self, rate: float) -> float:
        return self.max_queue_depth if self.max_queue_depth is not None else self.max_queue_seconds * rate

    def epsilon(self, rate: float) -> float:
        return self.growth_slope_epsilon if self.growth_slope_epsilon is not None else self.growth_slope_fraction * rate


@dataclass
class Verdict:
    sustainable: bool
    reason: Reason
    evidence: dict = field(default_factory=dict)

    def __post_init__(self):
        self.reason = Reason(self.reason)
        if self.sustainable != (self.reason is Reason.OK):
            raise ValueError("reason must be 'ok' exactly when sustainable")

    def to_dict(self) -> dict:
        return {"sustainable": self.sustainable, "reason": self.reason.value, "evidence": self.evidence}


def depth_slope(seconds: Sequence[float], depth: Sequence[float]) -> float:
    x = np.asarray(seconds, dtype=np.float64)
    y = np.asarray(depth, dtype=np.float64)
    if len(x) < 2:
        return 0.0
    xc = x - x.mean()
    return float((xc * (y - y.mean())).sum() / (xc * xc).sum())


def evaluate(
    telemetry: QueueTelemetry,
    rate: float,
    duration: float,
    policy: SustainabilityPolicy,
    connection_dropped: bool = False,
    depth_capped: bool = False,
) -> Verdict:
    """Sustainability verdict from total queue depth over the probe's tail."""
    if connection_dropped:
        return Verdict(False, Reason.CONNECTION_DROP, {"rate": rate})
    if depth_capped:
        return Verdict(False, Reason.DEPTH_CAP, {"rate": rate})
    n = min(len(telemetry), int(duration + 1e-9))
    tail_from = int(n * (1.0 - policy.observation_fraction))
    secs = telemetry.seconds[tail_from:n]
    depth = telemetry.depth[tail_from:n]
    q_max, eps = policy.q_max(rate), policy.epsilon(rate)
    slope = depth_slope(secs, depth)
    evidence = {
        "rate": rate,
        "tail_seconds": list(secs),
        "tail_depth": list(depth),
        "max_depth": max(depth, default=0),
        "slope": slope,
        "q_max": q_max,
        "epsilon": eps,
    }
    if len(secs) < 2:
        raise ValueError("probe too short for a verdict: need at least two tail samples")
    if evidence["max_depth"] > q_max or slope > eps:
        return Verdict(False, Reason.QUEUE_GROWTH, evidence)
    return Verdict(True, Reason.OK, evidence)


@dataclass
class RunResult:
    label: str
    rate: float
    schedule: RateSchedule
    verdict: Verdict
    valid: bool
    summaries: Optional[dict[str, MetricsSummary]]
    series: list[SeriesRow]
    telemetry: list[QueueTelemetry]
    generation: Optional[GenerationReport]
    engine: Optional[EngineReport]
    sink: Optional[Sink] = None
    optional: bool = False

    @property
    def total_telemetry(self) -> QueueTelemetry:
        return QueueTelemetry.total(self.telemetry)


@dataclass
class MstResult:
    mst_rate: float
    probes: list[tuple[float, Verdict]]
    ceiling_reached: bool = False


def _check_monotone(probes: Sequence[tuple[float, Verdict]]) -> None:
    ok = [p for p in probes if p[1].sustainable]
    bad = [p for p in probes if not p[1].sustainable]
    if ok and bad:
        top = max(ok, key=lambda p: p[0])
        low = min(bad, key=lambda p: p[0])
        if top[0] > low[0]:
            raise NonMonotoneSUT(top, low)


def find_mst(
    probe: Callable[[float], Verdict],
    lo: float,
    hi: float,
    rel_tol: float = 0.05,
    min_rate: float = 1.0,
) -> MstResult:
    """Binary search for the highest sustainable rate in ``[lo, hi]``.

    ``hi`` is probed first; a sustainable ``hi`` ends the search with a
    ceiling warning. A non-zero ``lo`` is probed to check the precondition.
    Stops once ``(hi - lo) / hi <= rel_tol``; a dropped connection halts the
    search with ``ConnectionDropped``.
    """
    if not 0 <= lo < hi:
        raise ValueError("need 0 <= lo < hi")
    probes: list[tuple[float, Verdict]] = []

    def run(rate: float) -> Verdict:
        v = probe(rate)
        probes.append((rate, v))
        log.info("probe %.0f ev/s -> %s", rate, v.reason.value)
        if v.reason is Reason.CONNECTION_DROP:
            raise ConnectionDropped(rate, probes)
        _check_monotone(probes)
        return v

    if run(hi).sustainable:
        log.warning("search ceiling reached: %.0f ev/s is sustainable", hi)
        if lo > 0:
            run(lo)
        return MstResult(hi, probes, ceiling_reached=True)
    best = None
    if lo > 0:
        if not run(lo).sustainable:
            raise NothingSustainable(f"lower bound {lo:.0f} ev/s is not sustainable", probes)
        best = lo
    while (hi - lo) / hi > rel_tol:
        if hi < min_rate:
            raise NothingSustainable(f"nothing sustainable above {min_rate} ev/s", probes)
        mid = (lo + hi) / 2
        if run(mid).sustainable:
            lo = best = mid
        else:
            hi = mid
    if best is None:
        raise NothingSustainable("no probed rate was sustainable", probes)
    return MstResult(best, probes)


class Harness:
    """Wires generator, queues, SUT and metrics together for one setup."""

    def __init__(
        self,
        generator: GeneratorConfig,
        engine: EngineConfig,
        sut: Optional[SutDescriptor] = None,
        policy: Optional[SustainabilityPolicy] = None,
        calibrate_seconds: float = 5.0,
        warmup: float = 0.25,
        drain_timeout: float = 60.0,
        hard_cap: int = DEFAULT_HARD_CAP,
        keep_outputs: bool = False,
        record_trace: bool = False,
    ):
        self.generator = generator
        self.engine = engine
        self.sut = sut or SutDescriptor(sources=generator.instances)
        if self.sut.sources != generator.instances:
            raise ValueError("sut.sources must equal generator.instances")
        self.policy = policy or SustainabilityPolicy()
        self.calibrate_seconds = calibrate_seconds
        self.warmup = warmup
        self.drain_timeout = drain_timeout
        self.hard_cap = hard_cap
        self.keep_outputs = keep_outputs
        if record_trace:
            self.engine = replace(engine, record_trace=True)
        self._max_rate: Optional[float] = None

    @property
    def max_rate(self) -> float:
        if self._max_rate is None:
            self._max_rate = calibrate(self.generator, self.calibrate_seconds)
        return self._max_rate

    def check_rate(self, rate: float) -> None:
        if rate > self.max_rate:
            raise GeneratorBound(f"generator-bound: {rate:.0f} ev/s requested, calibrated max {self.max_rate:.0f}")

    def execute(
        self,
        schedule: RateSchedule,
        label: str = "run",
        drain: bool = True,
        key_dist: Optional[KeyDistribution] = None,
        keep_outputs: Optional[bool] = None,
        policy: Optional[SustainabilityPolicy] = None,
        optional: bool = False,
    ) -> RunResult:
        """One run of ``schedule`` against a fresh SUT session.

        ``drain=False`` is a probe: the SUT is stopped as soon as the schedule
        ends, leaving any backlog unprocessed.
        """
        policy = policy or self.policy
        keep_outputs = self.keep_outputs if keep_outputs is None else keep_outputs
        rate = schedule.peak_rate
        self.check_rate(rate)
        n = self.generator.instances
        gcfg = replace(
            self.generator,
            rate_per_instance=rate / n,
            total_events=max(1, schedule.total_events()),
            key_dist=key_dist or self.generator.key_dist,
        )
        clock = Clock()
        soft = int(policy.q_max(rate) / n) + 1
        queues = [DriverQueue(capacity_soft=soft, hard_cap=self.hard_cap, name=f"q{i}") for i in range(n)]
        recorder = MetricsRecorder()
        sink = Sink(clock, recorder, keep_outputs=keep_outputs)
        session = connect(self.sut, queues, sink, self.engine, clock)
        gen = Generator(gcfg, schedule, queues, clock)
        # the schedule starts at the clock epoch, so scheduled event times repeat exactly
        gen.start(start_ns=0)
        sampler = TelemetrySampler(queues, clock).start(gen.start_ns)
        gen_report = gen.join(close_queues=drain)
        dropped = session.failure == "connection_drop" or isinstance(gen_report.error, QueueClosed)
        capped = isinstance(gen_report.error, DepthCapExceeded)
        dropped = dropped and not capped
        if drain and not (dropped or capped):
            if not session.wait(self.drain_timeout):
                log.warning("%s: SUT did not drain within %.0f s, stopping", label, self.drain_timeout)
                session.stop()
        else:
            session.stop()
        telemetry = sampler.stop()
        dropped = dropped or session.failure == "connection_drop"
        sink.close()
        verdict = evaluate(
            QueueTelemetry.total(telemetry), rate, schedule.duration, policy, connection_dropped=dropped,
            depth_capped=capped,
        )
        valid = not (dropped or capped)
        summaries, series = None, []
        if valid:
            try:
                summaries = recorder.summaries(self.warmup, schedule.duration)
            except EmptyAfterWarmup:
                log.warning("%s: no outputs after warmup", label)
            series = recorder.time_series()
        return RunResult(
            label=label,
            rate=rate,
            schedule=schedule,
            verdict=verdict,
            valid=valid,
            summaries=summaries,
            series=series,
            telemetry=telemetry,
            generation=gen_report,
            engine=getattr(session, "report", None),
            sink=sink if keep_outputs else None,
            optional=optional,
        )

    def probe(
        self,
        rate: float,
        duration: Optional[float] = None,
        policy: Optional[SustainabilityPolicy] = None,
        key_dist: Optional[KeyDistribution] = None,
    ) -> Verdict:
        policy = policy or self.policy
        duration = policy.min_run if duration is None else duration
        if duration < policy.min_run:
            raise ValueError(f"probe of {duration} s is shorter than policy.min_run={policy.min_run}")
        return self.execute(
            RateSchedule.constant(rate, duration), label=f"probe-{rate:.0f}", drain=False, key_dist=key_dist,
            policy=policy,
        ).verdict

    def find_mst(
        self,
        lo: float,
        hi: float,
        rel_tol: float = 0.05,
        duration: Optional[float] = None,
        key_dist: Optional[KeyDistribution] = None,
    ) -> MstResult:
        self.check_rate(hi)
        return find_mst(lambda r: self.probe(r, duration, key_dist=key_dist), lo, hi, rel_tol)


@dataclass
class SuiteReport:
    mst: Optional[MstResult]
    runs: list[RunResult]
    skew_mst: Optional[MstResult] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None and all(r.valid for r in self.runs if not r.optional)


def single_key(dist: KeyDistribution) -> KeyDistribution:
    fixed = min(max(int(round(dist.mean)), 0), dist.key_space - 1) if dist.mode is KeyMode.NORMAL else 0
    return KeyDistribution(KeyMode.SINGLE_KEY, dist.key_space, dist.mean, dist.stddev, fixed)


def run_suite(
    harness: Harness,
    run_seconds: float,
    mst_rate: Optional[float] = None,
    search: Optional[dict] = None,
    fluctuating: Optional[RateSchedule] = None,
    skew: bool = False,
    on_run: Optional[Callable[[RunResult], None]] = None,
) -> SuiteReport:
    """MST search, then full runs at MST and 0.9 x MST, then optional extras.

    ``search`` holds ``lo``, ``hi``, ``tol`` and ``probe_seconds``; pass
    ``mst_rate`` instead to skip the search.
    """
    search = search or {}
    runs: list[RunResult] = []

    def record(r: RunResult) -> RunResult:
        runs.append(r)
        if on_run is not None:
            on_run(r)
        return r

    mst = None
    if mst_rate is None:
        mst = harness.find_mst(search.get("lo", 0.0), search["hi"], search.get("tol", 0.05), search.get("probe_seconds"))
        mst_rate = mst.mst_rate
    for label, factor in (("mst", 1.0), ("mst-90", 0.9)):
        r = record(harness.execute(RateSchedule.constant(mst_rate * factor, run_seconds), label=label))
        if not r.valid:
            return SuiteReport(mst, runs, error=f"{label} run invalid: {r.verdict.reason.value}")
    if fluctuating is not None:
        record(harness.execute(fluctuating, label="fluctuating", optional=True))
    skew_mst = None
    if skew:
        dist = single_key(harness.generator.key_dist)
        skew_mst = harness.find_mst(
            search.get("lo", 0.0), search.get("hi", mst_rate * 2), search.get("tol", 0.05),
            search.get("probe_seconds"), key_dist=dist,
        )
        record(
            harness.execute(
                RateSchedule.constant(skew_mst.mst_rate, run_seconds), label="skew", key_dist=dist, optional=True
            )
        )
    return SuiteReport(mst, runs, skew_mst)
