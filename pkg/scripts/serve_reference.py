"""Serve the reference engine over TCP so the driver can run it with ``sut.mode: remote``."""

import argparse
import time

import _common  # noqa: F401  (puts src/ on the path)

from streamgauge.core import WindowSpec
from streamgauge.engine import EngineConfig
from streamgauge.remote_sut import RemoteSutServer


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7400)
    p.add_argument("--cap", type=float, help="service-rate cap (events/s)")
    p.add_argument("--range-ms", type=float, default=800)
    p.add_argument("--slide-ms", type=float, default=400)
    args = p.parse_args()
    cfg = EngineConfig(window=WindowSpec.from_ms(args.range_ms, args.slide_ms), service_rate_cap=args.cap)
    server = RemoteSutServer(cfg, args.host, args.port).start()
    print(f"serving on {server.address}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.close()


if __name__ == "__main__":
    main()
