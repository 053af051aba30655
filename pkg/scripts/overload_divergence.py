"""Offer twice the engine capacity and compare event- and processing-time latency trends."""

from _common import emit, parser

from streamgauge.experiments import overload, throttled_harness


def main():
    p = parser(__doc__)
    p.set_defaults(cap=20_000)
    p.add_argument("--factor", type=float, default=2.0, help="offered rate as a multiple of the cap")
    p.add_argument("--seconds", type=float, default=60)
    args = p.parse_args()
    res = overload(throttled_harness(args.cap, seed=args.seed), args.factor * args.cap, args.seconds)
    d = res.divergence
    emit(args, {
        "event_slope_s_per_s": round(d.event_slope, 4),
        "proc_slope_s_per_s": round(d.proc_slope, 5),
        "final_event_p50_s": res.final_event_p50 / 1e9,
        "final_proc_p50_s": res.final_proc_p50 / 1e9,
    })


if __name__ == "__main__":
    main()
