"""Binary search for the sustainable throughput of a capped reference engine."""

from _common import emit, parser

from streamgauge.experiments import throttled_harness


def main():
    p = parser(__doc__)
    p.add_argument("--hi", type=float, help="upper bound, default 4x cap")
    p.add_argument("--tol", type=float, default=0.05)
    p.add_argument("--probe-seconds", type=float, default=30)
    args = p.parse_args()
    h = throttled_harness(args.cap, seed=args.seed)
    res = h.find_mst(0, args.hi or 4 * args.cap, args.tol, args.probe_seconds)
    emit(args, {
        "mst": round(res.mst_rate),
        "ratio_to_cap": round(res.mst_rate / args.cap, 4),
        "probes": [f"{r:.0f}:{v.reason.value}" for r, v in res.probes],
        "ceiling_reached": res.ceiling_reached,
    })


if __name__ == "__main__":
    main()
