"""High/low/high offered load: per-second tracking error and recovery after the up-step."""

from _common import emit, parser

from streamgauge.experiments import fluctuating, throttled_harness
from streamgauge.generator import RateSchedule


def main():
    p = parser(__doc__)
    p.set_defaults(cap=None)
    p.add_argument("--high", type=float, default=8400)
    p.add_argument("--low", type=float, default=2800)
    p.add_argument("--segment-seconds", type=float, default=10)
    args = p.parse_args()
    d = args.segment_seconds
    schedule = RateSchedule(((d, args.high), (d, args.low), (d, args.high)))
    res = fluctuating(throttled_harness(args.cap, seed=args.seed), schedule)
    emit(args, {
        "max_throughput_error": round(max(res.throughput_error), 4),
        "low_segment_p50_ms": res.low_median / 1e6,
        "settle_seconds": res.settle_seconds,
    })


if __name__ == "__main__":
    main()
