"""Command line: ``run``, ``find-mst`` and ``report``.

Exit codes: 0 ok, 1 invalid config, 2 runtime or connection failure,
3 failures that are only unsustainable runs.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from . import config as cfgmod
from .driver import (
    ConnectionDropped,
    GeneratorBound,
    Harness,
    NonMonotoneSUT,
    NothingSustainable,
    Reason,
    SuiteReport,
    run_suite,
)
from .protocol import ProtocolError
from .report import MissingArtifacts, cmd_report, new_suite_dir, write_run, write_suite

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_UNSUSTAINABLE = 0, 1, 2, 3

log = logging.getLogger("streamgauge")


def build_harness(cfg: cfgmod.BenchConfig) -> Harness:
    return Harness(
        generator=cfg.generator_config(),
        engine=cfg.engine_config(),
        sut=cfg.sut_descriptor(),
        policy=cfg.policy_obj(),
        calibrate_seconds=cfg.generator.calibrate_seconds,
        warmup=cfg.run.warmup,
        drain_timeout=cfg.run.drain_timeout_s,
    )


def suite_exit_code(suite: SuiteReport) -> int:
    if suite.ok:
        return EXIT_OK
    required = [r for r in suite.runs if not r.optional]
    if any(r.verdict.reason is Reason.CONNECTION_DROP for r in required):
        return EXIT_RUNTIME
    return EXIT_UNSUSTAINABLE


def _search(cfg: cfgmod.BenchConfig) -> dict:
    m = cfg.mst
    return {"lo": m.lo, "hi": m.hi, "tol": m.tol, "probe_seconds": m.probe_seconds}


def cmd_run(config_path: str) -> int:
    cfg = cfgmod.load(config_path)
    harness = build_harness(cfg)
    suite_dir = new_suite_dir(cfg.resolved_output_dir())
    log.info("artifacts in %s", suite_dir)
    suite = run_suite(
        harness,
        cfg.run.duration_s,
        mst_rate=cfg.mst.rate,
        search=_search(cfg),
        fluctuating=cfg.fluctuating_schedule(),
        skew=cfg.skew.enabled,
        on_run=lambda r: write_run(suite_dir, r, cfg.sut.name),
    )
    write_suite(suite_dir, suite, cfg.to_dict())
    if suite.error:
        log.error("%s", suite.error)
    for r in suite.runs:
        line = f"{r.label}: {r.rate:.0f} ev/s, {r.verdict.reason.value}"
        if r.summaries:
            ev = r.summaries["event"].to_seconds()
            line += f", event-latency p99 {ev['q99']:.3f} s"
        print(line)
    print(f"artifacts: {suite_dir}")
    return suite_exit_code(suite)


def cmd_find_mst(config_path: str, hi: Optional[float] = None, tol: Optional[float] = None) -> int:
    cfg = cfgmod.load(config_path)
    if hi is not None:
        cfg.mst.hi = float(hi)
    if tol is not None:
        cfg.mst.tol = float(tol)
    cfg.validate()
    harness = build_harness(cfg)
    res = harness.find_mst(cfg.mst.lo, cfg.mst.hi, cfg.mst.tol, cfg.mst.probe_seconds)
    for rate, v in res.probes:
        print(f"probe {rate:.0f} ev/s: {v.reason.value}")
    if res.ceiling_reached:
        print(f"warning: search ceiling reached at {res.mst_rate:.0f} ev/s")
    print(f"MST: {res.mst_rate:.0f} ev/s ({len(res.probes)} probes)")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamgauge", description="Stream-processing benchmark driver")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="MST search then the full run suite")
    r.add_argument("config")
    f = sub.add_parser("find-mst", help="search the maximum sustainable throughput")
    f.add_argument("config")
    f.add_argument("--hi", type=float, help="upper rate bound (events/s)")
    f.add_argument("--tol", type=float, help="relative search tolerance")
    rep = sub.add_parser("report", help="latency tables and plot data from a suite directory")
    rep.add_argument("dir")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        if args.cmd == "run":
            return cmd_run(args.config)
        if args.cmd == "find-mst":
            return cmd_find_mst(args.config, args.hi, args.tol)
        out = cmd_report(args.dir)
        print(f"report written to {out}")
        return EXIT_OK
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NothingSustainable as exc:
        print(f"unsustainable: {exc}", file=sys.stderr)
        return EXIT_UNSUSTAINABLE
    except MissingArtifacts as exc:
        print(f"missing artifacts: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConnectionDropped, GeneratorBound, NonMonotoneSUT, ProtocolError, OSError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
