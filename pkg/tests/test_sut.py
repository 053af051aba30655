import socket
import threading
import time

import numpy as np
import pytest

from conftest import FixedClock, agg_oracle, sample_batch
from streamgauge.core import Clock, WindowSpec
from streamgauge.driver_queue import DriverQueue
from streamgauge.engine import EngineConfig
from streamgauge.metrics import MetricsRecorder
from streamgauge.protocol import PROTOCOL_VERSION, Hello, QueryKind, read_message, send_message
from streamgauge.remote_sut import RemoteSutServer
from streamgauge.sut import OutputRecord, Sink, SinkClosed, SutDescriptor, connect


def test_sink_stamps_emission_on_receipt():
    clock = FixedClock(610)
    rec = MetricsRecorder(keep_raw=True)
    sink = Sink(clock, rec, keep_outputs=True)
    out = sink.emit(OutputRecord(QueryKind.AGG, (1, 42, 0), 600, 601))
    assert out.emission_time == 610
    assert out.emission_time - out.max_event_time == 10
    assert out.emission_time - out.max_ingest_time == 9
    assert rec.raw[0].tolist() == [[610, 10, 9]]


def test_sink_keeps_duplicates_and_refuses_after_close():
    sink = Sink(FixedClock(100), keep_outputs=True)
    r = OutputRecord(QueryKind.JOIN, (1, 2, 3), 50, 60)
    sink.emit(r)
    sink.emit(r)
    assert sink.emit_many(QueryKind.JOIN, [(1, 2, 3), (1, 2, 3)], 50, 60) == 2
    assert sink.received == 4 and len(sink.outputs) == 4
    sink.close()
    with pytest.raises(SinkClosed):
        sink.emit(r)


def test_descriptor_validation():
    with pytest.raises(ValueError, match="sut.address"):
        SutDescriptor(mode="remote", sources=1)
    with pytest.raises(ValueError):
        SutDescriptor(mode="remote", sources=1, address="nope")


def prefilled_queues(n_src, n_events, clock_span_ns):
    queues = []
    all_events = []
    for i in range(n_src):
        times = np.linspace(0, clock_span_ns, n_events).astype(np.int64)
        b = sample_batch(n_events, seed=i + 1, times=times)
        q = DriverQueue(name=f"q{i}")
        q.offer_batch(b)
        q.close()
        queues.append(q)
        all_events.append(b)
    return queues, all_events


def test_remote_session_matches_oracle():
    spec = WindowSpec.from_ms(200, 100)
    server = RemoteSutServer(EngineConfig(window=spec)).start()
    try:
        # events lie in the driver's past so latencies are non-negative
        clock = Clock(epoch_ns=time.monotonic_ns() - 5 * 10**9)
        queues, batches = prefilled_queues(2, 3000, 2 * 10**9)
        sink = Sink(clock, keep_outputs=True)
        session = connect(SutDescriptor(mode="remote", sources=2, address=server.address), queues, sink)
        assert session.wait(30)
        assert session.failure is None
    finally:
        server.close()
    final_wm = min(int(b["event_time"][-1]) for b in batches)
    want = agg_oracle(np.concatenate(batches), spec, through=final_wm)
    got = {(p[2], p[0]): (p[1], o.max_event_time) for o in sink.outputs for p in [o.payload]}
    assert got == {k: (v[0], v[2]) for k, v in want.items()}
    assert sink.recorder.anomalies == 0


def stub_server(behaviour):
    """One-shot TCP stub running ``behaviour(conn)`` after accept."""
    lsock = socket.create_server(("127.0.0.1", 0))

    def run():
        conn, _ = lsock.accept()
        try:
            behaviour(conn)
        finally:
            conn.close()
            lsock.close()

    threading.Thread(target=run, daemon=True).start()
    return "127.0.0.1:%d" % lsock.getsockname()[1]


def test_socket_close_mid_run_drops_queues():
    def behaviour(conn):
        hello = read_message(conn)
        send_message(conn, Hello(PROTOCOL_VERSION, hello.n_sources))
        time.sleep(0.2)
        conn.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, b"\x01\x00\x00\x00\x00\x00\x00\x00")

    addr = stub_server(behaviour)
    queues = [DriverQueue()]
    queues[0].offer_batch(sample_batch(10))
    session = connect(SutDescriptor(mode="remote", sources=1, address=addr), queues, Sink(Clock()))
    assert session.wait(5)
    assert session.failure == "connection_drop"
    with pytest.raises(Exception):
        queues[0].offer_batch(sample_batch(1))


def test_unreachable_remote_raises_connection_refused():
    s = socket.create_server(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    with pytest.raises(ConnectionRefusedError):
        connect(SutDescriptor(mode="remote", sources=1, address=f"127.0.0.1:{port}"), [DriverQueue()], Sink(Clock()))


def test_in_process_session_runs_to_completion():
    spec = WindowSpec.from_ms(100, 50)
    clock = Clock(epoch_ns=time.monotonic_ns() - 5 * 10**9)
    queues, batches = prefilled_queues(2, 2000, 10**9)
    sink = Sink(clock, keep_outputs=True)
    session = connect(SutDescriptor(sources=2), queues, sink, EngineConfig(window=spec))
    assert session.wait(30)
    assert session.report.events_processed == 4000
    assert len(sink.outputs) == session.report.outputs > 0
