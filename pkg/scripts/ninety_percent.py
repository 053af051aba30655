"""Search the sustainable rate, then compare latency at that rate and at 90 % of it."""

from _common import emit, parser

from streamgauge.experiments import ninety_percent, throttled_harness


def main():
    p = parser(__doc__)
    p.add_argument("--mst", type=float, help="skip the search and use this rate")
    p.add_argument("--seconds", type=float, default=60)
    args = p.parse_args()
    h = throttled_harness(args.cap, seed=args.seed)
    rate = args.mst or h.find_mst(0, 4 * args.cap, 0.05, 30).mst_rate
    out = {"mst": round(rate)}
    for run in ninety_percent(h, rate, args.seconds):
        s = run.summaries["event"]
        out[run.label] = {"rate": round(run.rate), "q99_ms": s.q99 / 1e6, "stddev_ms": round(s.stddev / 1e6, 2)}
    emit(args, out)


if __name__ == "__main__":
    main()
