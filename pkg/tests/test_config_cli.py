import socket

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from streamgauge import config as cfgmod
from streamgauge.cli import main

SMALL_RUN = """
query: agg
window: {range_ms: 400, slide_ms: 200}
generator:
  instances: 2
  seed: 7
  calibrate_seconds: 0.5
sut: {parallelism: 2}
mst: {rate: 8000}
run: {duration_s: 4, warmup: 0.25}
"""


def write(tmp_path, text, name="bench.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_defaults_from_empty_file():
    c = cfgmod.parse("")
    assert c.query == "agg"
    assert c.window_spec().range_ns == 800_000_000
    assert c.policy_obj().min_run == 30


def test_slide_over_range_names_the_field():
    with pytest.raises(cfgmod.ConfigError, match=r"window\.slide"):
        cfgmod.parse("window: {range_ms: 100, slide_ms: 200}")


@pytest.mark.parametrize(
    "text, path",
    [
        ("generator: {bogus: 1}", "generator.bogus"),
        ("run: {duration_s: fast}", "run.duration_s"),
        ("sut: {parallelism: true}", "sut.parallelism"),
        ("window: 5", "window"),
        ("query: scan", "query"),
        ("mst: {lo: 10, hi: 5}", "mst"),
        ("sut: {mode: remote}", "sut.address"),
        ("generator: {key_dist: {mode: zipf}}", "KeyMode"),
    ],
)
def test_validation_errors_carry_field_paths(text, path):
    with pytest.raises(cfgmod.ConfigError, match=path):
        cfgmod.parse(text)


@settings(max_examples=30)
@given(
    rng=st.floats(1, 10_000),
    frac=st.floats(0.01, 1.0),
    inst=st.integers(1, 8),
    query=st.sampled_from(["agg", "join"]),
    cap=st.none() | st.floats(1, 1e6),
)
def test_round_trip(rng, frac, inst, query, cap):
    c = cfgmod.parse("")
    c.window.range_ms, c.window.slide_ms = rng, rng * frac
    c.generator.instances = inst
    c.query = query
    c.sut.service_rate_cap = cap
    c.validate()
    again = cfgmod.parse(c.dump())
    assert again == c
    assert cfgmod.parse(again.dump()) == again


def test_output_dir_env_override(monkeypatch, tmp_path):
    c = cfgmod.parse("output_dir: somewhere")
    monkeypatch.delenv(cfgmod.ENV_OUT, raising=False)
    assert str(c.resolved_output_dir()) == "somewhere"
    monkeypatch.setenv(cfgmod.ENV_OUT, str(tmp_path))
    assert c.resolved_output_dir() == tmp_path


def test_cli_validation_exit_code(tmp_path, capsys):
    p = write(tmp_path, "window: {range_ms: 100, slide_ms: 200}")
    assert main(["run", str(p)]) == 1
    assert "window.slide" in capsys.readouterr().err


def test_cli_unreachable_remote(tmp_path, capsys, monkeypatch):
    s = socket.create_server(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    monkeypatch.setenv(cfgmod.ENV_OUT, str(tmp_path / "out"))
    p = write(tmp_path, SMALL_RUN + f"\n" + yaml.safe_dump({"sut": {"mode": "remote", "address": f"127.0.0.1:{port}"}}))
    assert main(["run", str(p)]) == 2
    assert "ConnectionRefused" in capsys.readouterr().err


def test_cli_report_on_empty_dir(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 2
    assert "missing artifacts" in capsys.readouterr().err


FIND = """
window: {range_ms: 400, slide_ms: 200}
generator: {calibrate_seconds: 0.5}
sut: {service_rate_cap: 50000}
policy: {min_run: 6}
mst: {lo: 0, hi: 100000, tol: 0.1, probe_seconds: 6}
"""


def probes_printed(out):
    return [line for line in out.splitlines() if line.startswith("probe ")]


def test_find_mst_throttled(tmp_path, capsys):
    assert main(["find-mst", str(write(tmp_path, FIND))]) == 0
    out = capsys.readouterr().out
    mst = float(out.split("MST: ")[1].split()[0])
    assert 45_000 <= mst <= 55_000


def test_find_mst_ceiling_and_tolerance(tmp_path, capsys):
    p = str(write(tmp_path, FIND))
    assert main(["find-mst", p, "--hi", "20000"]) == 0
    out = capsys.readouterr().out
    assert "search ceiling reached" in out and "MST: 20000" in out
    assert main(["find-mst", p, "--tol", "0.5"]) == 0
    assert len(probes_printed(capsys.readouterr().out)) - 1 <= 2
