"""Desk-scale experiments on the throttled reference engine.

Each function runs one experiment end to end and returns the numbers that
judge it; ``scripts/`` wraps them in command lines and the acceptance tests
call them directly.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from typing import Optional

from .core import KeyDistribution, WindowSpec
from .driver import Harness, MstResult, RunResult, SustainabilityPolicy, single_key
from .engine import EngineConfig
from .generator import GeneratorConfig, RateSchedule
from .metrics import Divergence, divergence_report
from .protocol import QueryKind

# dense keys: 100 gem packs keep every window populated at a few k events/s
DENSE_KEYS = KeyDistribution("normal", key_space=100, mean=50, stddev=25)


def throttled_harness(
    cap: Optional[float],
    policy: Optional[SustainabilityPolicy] = None,
    instances: int = 2,
    parallelism: int = 2,
    window: WindowSpec = WindowSpec.from_ms(800, 400),
    key_dist: KeyDistribution = DENSE_KEYS,
    seed: int = 42,
    timestamping: str = "wall",
    calibrate_seconds: float = 1.0,
    warmup: float = 0.25,
    query: QueryKind = QueryKind.AGG,
    purchases_share: float = 1.0,
    keep_outputs: bool = False,
    record_trace: bool = False,
) -> Harness:
    """Reference engine whose total service rate is capped at ``cap`` events/s."""
    return Harness(
        GeneratorConfig(
            instances=instances, seed=seed, key_dist=key_dist, timestamping=timestamping,
            purchases_share=purchases_share,
        ),
        EngineConfig(query=query, window=window, service_rate_cap=cap, parallelism=parallelism),
        policy=policy,
        calibrate_seconds=calibrate_seconds,
        warmup=warmup,
        keep_outputs=keep_outputs,
        record_trace=record_trace,
    )


@dataclass
class OverloadResult:
    run: RunResult
    divergence: Divergence
    final_event_p50: int  # ns, last full second of the run
    final_proc_p50: int


def overload(harness: Harness, rate: float, seconds: float = 60.0) -> OverloadResult:
    """Offer ``rate`` for ``seconds`` without draining; compare latency trends."""
    run = harness.execute(RateSchedule.constant(rate, seconds), label="overload", drain=False)
    rows = [r for r in run.series if r.second < seconds]
    div = divergence_report(rows, min_seconds=int(seconds * 0.5))
    last = max(r.second for r in rows if r.metric == "event")
    ev = next(r.p50 for r in rows if r.second == last and r.metric == "event")
    pr = next(r.p50 for r in rows if r.second == last and r.metric == "proc")
    return OverloadResult(run, div, ev, pr)


def ninety_percent(harness: Harness, mst_rate: float, seconds: float = 60.0) -> tuple[RunResult, RunResult]:
    """Full runs at the sustainable rate and at 90 % of it."""
    at_mst = harness.execute(RateSchedule.constant(mst_rate, seconds), label="mst")
    at_90 = harness.execute(RateSchedule.constant(0.9 * mst_rate, seconds), label="mst-90")
    return at_mst, at_90


@dataclass
class FluctuationResult:
    run: RunResult
    throughput_error: list[float]  # per full second, relative to the schedule
    low_median: int  # ns, median per-second event p50 during the low segment
    settle_seconds: Optional[int]  # seconds after the up-step until p50 <= 2x low median for good


def fluctuating(harness: Harness, schedule: RateSchedule) -> FluctuationResult:
    """Run a three-segment high/low/high profile and measure tracking and recovery."""
    if len(schedule.segments) != 3:
        raise ValueError("expected a high/low/high schedule")
    run = harness.execute(schedule, label="fluctuating")
    tel = run.total_telemetry
    end = int(schedule.duration)
    errors = []
    for k in range(min(end, len(tel))):
        want = schedule.cumulative(k + 1) - schedule.cumulative(k)
        errors.append(abs(tel.take_rate[k] - want) / want)
    (d1, _), (d2, _), _ = schedule.segments
    low_start, up = int(d1), int(d1 + d2)
    p50 = {r.second: r.p50 for r in run.series if r.metric == "event" and r.second < end}
    low = [p50[s] for s in range(low_start, up) if s in p50]
    low_median = int(statistics.median(low))
    settle = None
    after = [s for s in sorted(p50) if s >= up]
    for i, s in enumerate(after):
        if all(p50[t] <= 2 * low_median for t in after[i:]):
            settle = s - up
            break
    return FluctuationResult(run, errors, low_median, settle)


def skew_comparison(
    harness: Harness, lo: float, hi: float, rel_tol: float = 0.05, duration: Optional[float] = None
) -> tuple[MstResult, MstResult]:
    """Sustainable throughput with the configured keys and with a single key."""
    normal = harness.find_mst(lo, hi, rel_tol, duration)
    skewed = harness.find_mst(lo, hi, rel_tol, duration, key_dist=single_key(harness.generator.key_dist))
    return normal, skewed
