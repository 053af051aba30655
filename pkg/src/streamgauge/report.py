"""Run artifacts on disk and the reports derived from them.

Layout of one suite directory::

    suite.json                     # MST search, run index, config echo
    runs/<label>/run.json          # verdict, summaries, generation stats
    runs/<label>/latency_timeseries.csv
    runs/<label>/throughput.csv    # offered vs ingested events per second
    runs/<label>/queue_<i>.csv

``render_report`` reads only these files, so reports are reproducible byte
for byte from an artifact directory.
"""

from __future__ import annotations

import csv
import io
import json
import time
from pathlib import Path
from typing import Optional

from .driver import MstResult, RunResult, SuiteReport
from .metrics import series_from_csv, series_to_csv

REPORT_DIR = "report"
TABLE_COLUMNS = ("avg", "min", "max", "q90", "q95", "q99")
ROW_SUFFIX = {"mst": "", "mst-90": "(90%)", "fluctuating": "(fluct)", "skew": "(skew)"}


class MissingArtifacts(FileNotFoundError):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _probes(probes) -> list[dict]:
    return [{"rate": r, **v.to_dict()} for r, v in probes]


def _mst_dict(m: Optional[MstResult]) -> Optional[dict]:
    if m is None:
        return None
    return {"mst_rate": m.mst_rate, "ceiling_reached": m.ceiling_reached, "probes": _probes(m.probes)}


def new_suite_dir(output_dir, stamp: Optional[str] = None) -> Path:
    stamp = stamp or time.strftime("%Y%m%d-%H%M%S")
    base = Path(output_dir)
    path, k = base / stamp, 1
    while path.exists():
        k += 1
        path = base / f"{stamp}-{k}"
    path.mkdir(parents=True)
    return path


def throughput_csv(run: RunResult) -> str:
    total = run.total_telemetry
    generated = run.generation.per_second if run.generation else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["second", "generated", "offered", "ingested", "depth"])
    for i, s in enumerate(total.seconds):
        gen = generated[i] if i < len(generated) else 0
        w.writerow([s, gen, f"{total.offer_rate[i]:.1f}", f"{total.take_rate[i]:.1f}", total.depth[i]])
    return buf.getvalue()


def run_dict(run: RunResult, sut_name: str = "reference") -> dict:
    g = run.generation
    return {
        "label": run.label,
        "sut": sut_name,
        "rate": run.rate,
        "schedule": [list(seg) for seg in run.schedule.segments],
        "optional": run.optional,
        "valid": run.valid,
        "verdict": run.verdict.to_dict(),
        "summaries": None if run.summaries is None else {k: s.to_seconds() for k, s in run.summaries.items()},
        "generation": None
        if g is None
        else {"events_emitted": g.events_emitted, "wall_time": g.wall_time, "max_pacing_error": g.max_pacing_error},
        "engine": None
        if run.engine is None
        else {
            "events_processed": run.engine.events_processed,
            "windows_closed": run.engine.windows_closed,
            "late_events": run.engine.late_events,
            "outputs": run.engine.outputs,
        },
    }


def write_run(suite_dir: Path, run: RunResult, sut_name: str = "reference") -> Path:
    d = Path(suite_dir) / "runs" / run.label
    d.mkdir(parents=True, exist_ok=True)
    (d / "run.json").write_text(_dump(run_dict(run, sut_name)))
    if run.valid:
        (d / "latency_timeseries.csv").write_text(series_to_csv(run.series))
    (d / "throughput.csv").write_text(throughput_csv(run))
    for i, t in enumerate(run.telemetry):
        (d / f"queue_{i}.csv").write_text(t.to_csv())
    return d


def write_suite(suite_dir: Path, suite: SuiteReport, config: Optional[dict] = None) -> Path:
    doc = {
        "ok": suite.ok,
        "error": suite.error,
        "mst": _mst_dict(suite.mst),
        "skew_mst": _mst_dict(suite.skew_mst),
        "runs": [r.label for r in suite.runs],
        "config": config,
    }
    path = Path(suite_dir) / "suite.json"
    path.write_text(_dump(doc))
    return path


# -- reading artifacts back ------------------------------------------------


def _load_runs(run_dir: Path) -> list[dict]:
    suite_file = run_dir / "suite.json"
    if not suite_file.is_file():
        raise MissingArtifacts(f"{run_dir}: no suite.json")
    suite = json.loads(suite_file.read_text())
    runs = []
    for label in suite["runs"]:
        f = run_dir / "runs" / label / "run.json"
        if not f.is_file():
            raise MissingArtifacts(f"{f} is missing")
        runs.append(json.loads(f.read_text()))
    if not runs:
        raise MissingArtifacts(f"{run_dir}: suite lists no runs")
    return runs


def _row_name(run: dict) -> str:
    return run["sut"] + ROW_SUFFIX.get(run["label"], f"({run['label']})")


def latency_table(runs: list[dict], metric: str = "event") -> str:
    """Fixed-width table of latency statistics in seconds, one row per valid run."""
    head = ["system", "rate"] + list(TABLE_COLUMNS)
    rows = []
    for r in runs:
        if not r["valid"] or not r["summaries"]:
            rows.append([_row_name(r), f"{r['rate']:.0f}"] + ["invalid"] * len(TABLE_COLUMNS))
            continue
        s = r["summaries"][metric]
        rows.append([_row_name(r), f"{r['rate']:.0f}"] + [f"{s[c]:.3f}" for c in TABLE_COLUMNS])
    widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
    fmt = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([fmt(head)] + [fmt(r) for r in rows]) + "\n"


def _latency_dat(text: str) -> str:
    rows = series_from_csv(text)
    proc = {r.second: r for r in rows if r.metric == "proc"}
    out = ["# second event_p50 event_p90 event_p99 proc_p50 proc_p90 proc_p99 (seconds)"]
    for r in rows:
        if r.metric != "event":
            continue
        p = proc.get(r.second)
        vals = [r.p50, r.p90, r.p99] + ([p.p50, p.p90, p.p99] if p else [float("nan")] * 3)
        out.append(f"{r.second} " + " ".join(f"{v / 1e9:.6f}" for v in vals))
    return "\n".join(out) + "\n"


def _throughput_dat(text: str) -> str:
    out = ["# second generated offered ingested depth (events)"]
    for d in csv.DictReader(io.StringIO(text)):
        out.append(f"{d['second']} {d['generated']} {d['offered']} {d['ingested']} {d['depth']}")
    return "\n".join(out) + "\n"


def render_report(run_dir) -> dict[str, str]:
    """All report files for ``run_dir`` as a name -> content mapping."""
    run_dir = Path(run_dir)
    runs = _load_runs(run_dir)
    files = {
        "latency_event.txt": latency_table(runs, "event"),
        "latency_proc.txt": latency_table(runs, "proc"),
    }
    for r in runs:
        d = run_dir / "runs" / r["label"]
        series = d / "latency_timeseries.csv"
        if r["valid"] and series.is_file():
            files[f"{r['label']}.latency.dat"] = _latency_dat(series.read_text())
        tp = d / "throughput.csv"
        if not tp.is_file():
            raise MissingArtifacts(f"{tp} is missing")
        files[f"{r['label']}.throughput.dat"] = _throughput_dat(tp.read_text())
    return files


def cmd_report(run_dir) -> Path:
    out = Path(run_dir) / REPORT_DIR
    files = render_report(run_dir)
    out.mkdir(exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text)
    return out

