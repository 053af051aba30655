"""Sustainable throughput with spread keys versus every event on one key."""

from _common import emit, parser

from streamgauge.experiments import skew_comparison, throttled_harness


def main():
    p = parser(__doc__)
    p.add_argument("--tol", type=float, default=0.05)
    p.add_argument("--probe-seconds", type=float, default=30)
    args = p.parse_args()
    normal, skewed = skew_comparison(
        throttled_harness(args.cap, seed=args.seed), 0, 4 * args.cap, args.tol, args.probe_seconds
    )
    emit(args, {
        "mst_normal": round(normal.mst_rate),
        "mst_single_key": round(skewed.mst_rate),
        "ratio": round(skewed.mst_rate / normal.mst_rate, 3),
    })


if __name__ == "__main__":
    main()
