"""Boundary between the driver and a system under test.

The driver owns the queues and the sink; the SUT only pulls events and hands
back outputs carrying the maximum event and ingest times of their
contributors. Emission time is stamped here, on receipt, with the driver's
clock, so all latency arithmetic happens outside the SUT.
"""

from __future__ import annotations

import enum
import logging
import socket
import threading
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import Clock, empty_batch
from .driver_queue import DriverQueue, QueueClosed
from .metrics import MetricsRecorder
from .protocol import (
    PROTOCOL_VERSION,
    Bye,
    Eos,
    Events,
    HandshakeVersionMismatch,
    Hello,
    Output,
    ProtocolError,
    Pull,
    QueryKind,
    parse_address,
    read_message,
    send_message,
)

log = logging.getLogger(__name__)


class SinkClosed(RuntimeError):
    pass


class SutMode(str, enum.Enum):
    IN_PROCESS = "in_process"
    REMOTE = "remote"


@dataclass(frozen=True)
class OutputRecord:
    query: QueryKind
    payload: tuple
    max_event_time: int
    max_ingest_time: int
    emission_time: Optional[int] = None


@dataclass(frozen=True)
class SutDescriptor:
    name: str = "reference"
    mode: SutMode = SutMode.IN_PROCESS
    sources: int = 1
    address: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", SutMode(self.mode))
        if self.sources <= 0:
            raise ValueError("sut.sources must be positive")
        if self.mode is SutMode.REMOTE:
            if not self.address:
                raise ValueError("sut.address is required in remote mode")
            parse_address(self.address)


class Sink:
    """Driver-side sink: stamps emission time on receipt, forwards to metrics.

    ``keep_outputs`` retains every stamped record (tests and oracle checks).
    """

    def __init__(self, clock: Clock, recorder: Optional[MetricsRecorder] = None, keep_outputs: bool = False):
        self.clock = clock
        self.recorder = recorder if recorder is not None else MetricsRecorder()
        self.keep_outputs = keep_outputs
        self.outputs: list[OutputRecord] = []
        self.received = 0
        self.closed = False

    def emit(self, rec: OutputRecord) -> OutputRecord:
        if self.closed:
            raise SinkClosed("sink is closed")
        rec = replace(rec, emission_time=self.clock.now())
        self.received += 1
        self.recorder.record(rec)
        if self.keep_outputs:
            self.outputs.append(rec)
        return rec

    def emit_many(self, query: QueryKind, payloads: Sequence[tuple], max_event_time, max_ingest_time) -> int:
        """Receive a group of outputs that arrived together (one stamp)."""
        if self.closed:
            raise SinkClosed("sink is closed")
        n = len(payloads)
        if n == 0:
            return 0
        now = self.clock.now()
        et = np.broadcast_to(np.asarray(max_event_time, dtype=np.int64), (n,))
        it = np.broadcast_to(np.asarray(max_ingest_time, dtype=np.int64), (n,))
        self.received += n
        self.recorder.record_many(query, et, it, now)
        if self.keep_outputs:
            self.outputs.extend(
                OutputRecord(query, tuple(p), int(e), int(i), now) for p, e, i in zip(payloads, et.tolist(), it.tolist())
            )
        return n

    def close(self) -> None:
        self.closed = True


class Session:
    """A connected SUT. ``failure`` is set to ``"connection_drop"`` on loss."""

    failure: Optional[str] = None

    def wait(self, timeout: Optional[float] = None) -> bool:
        raise NotImplementedError

    def stop(self) -> None:
        raise NotImplementedError

    @property
    def finished(self) -> bool:
        raise NotImplementedError


class InProcessSession(Session):
    def __init__(self, engine, queues: Sequence[DriverQueue], sink: Sink):
        self.engine = engine
        self.report = None
        self.failure = None
        self._error: Optional[BaseException] = None
        self._thread = threading.Thread(target=self._run, args=(queues, sink), name="engine", daemon=True)
        self._thread.start()

    def _run(self, queues, sink) -> None:
        try:
            self.report = self.engine.run(queues, sink)
        except BaseException as exc:  # surfaced through wait()
            self._error = exc

    def wait(self, timeout: Optional[float] = None) -> bool:
        self._thread.join(timeout)
        if self._error is not None:
            raise self._error
        return not self._thread.is_alive()

    @property
    def finished(self) -> bool:
        return not self._thread.is_alive()

    def stop(self) -> None:
        self.engine.stop()
        self._thread.join()


class RemoteSession(Session):
    """Driver end of the wire protocol.

    One reader thread answers PULLs from the driver queues and forwards
    OUTPUT frames to the sink, preserving their order. Losing the connection
    before an orderly BYE drops every queue.
    """

    def __init__(self, sock: socket.socket, queues: Sequence[DriverQueue], sink: Sink, clock: Clock):
        self.sock = sock
        self.queues = list(queues)
        self.sink = sink
        self.clock = clock
        self.failure = None
        self.outputs_received = 0
        self._closing = False
        self._done = threading.Event()
        self._send_lock = threading.Lock()
        self._eos_sent = False
        self._thread = threading.Thread(target=self._loop, name="remote-session", daemon=True)
        self._thread.start()

    def _send(self, msg) -> None:
        with self._send_lock:
            send_message(self.sock, msg)

    def _loop(self) -> None:
        try:
            while True:
                msg = read_message(self.sock)
                if isinstance(msg, Pull):
                    self._answer_pull(msg)
                elif isinstance(msg, Output):
                    # event times travel in the driver's clock domain; ingest
                    # stamps come from the SUT's monotonic clock on this host
                    self.sink.emit(
                        OutputRecord(
                            msg.query,
                            msg.payload,
                            msg.max_event_time,
                            self.clock.from_absolute(msg.max_ingest_time),
                        )
                    )
                    self.outputs_received += 1
                elif isinstance(msg, Bye):
                    if not self._closing:
                        self._closing = True
                        self._send(Bye())
                    break
                else:
                    raise ProtocolError(f"unexpected {type(msg).__name__} from SUT")
        except (OSError, ConnectionError, ProtocolError) as exc:
            if not self._closing:
                log.warning("SUT connection lost: %s", exc)
                self._fail()
        finally:
            self._done.set()
            try:
                self.sock.close()
            except OSError:
                pass

    def _answer_pull(self, msg: Pull) -> None:
        if not 0 <= msg.source_id < len(self.queues):
            raise ProtocolError(f"PULL for unknown source {msg.source_id}")
        if all(q.exhausted for q in self.queues):
            if not self._eos_sent:
                self._eos_sent = True
                self._send(Eos())
                return
        try:
            batch = self.queues[msg.source_id].take_batch(msg.max_n)
        except QueueClosed:
            batch = empty_batch(0)
        self._send(Events(msg.source_id, batch))

    def _fail(self) -> None:
        self.failure = "connection_drop"
        for q in self.queues:
            q.drop()

    def wait(self, timeout: Optional[float] = None) -> bool:
        return self._done.wait(timeout)

    @property
    def finished(self) -> bool:
        return self._done.is_set()

    def stop(self, timeout: float = 5.0) -> None:
        if self._done.is_set():
            return
        self._closing = True
        try:
            self._send(Bye())
        except OSError:
            pass
        if not self._done.wait(timeout):
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._done.wait(timeout)


def handshake(sock: socket.socket, n_sources: int) -> Hello:
    send_message(sock, Hello(PROTOCOL_VERSION, n_sources))
    reply = read_message(sock)
    if not isinstance(reply, Hello):
        raise ProtocolError(f"expected HELLO, got {type(reply).__name__}")
    if reply.version != PROTOCOL_VERSION:
        raise HandshakeVersionMismatch(f"SUT speaks version {reply.version}, driver speaks {PROTOCOL_VERSION}")
    if reply.n_sources != n_sources:
        raise ProtocolError(f"SUT expects {reply.n_sources} sources, driver has {n_sources}")
    return reply


def connect(
    desc: SutDescriptor,
    queues: Sequence[DriverQueue],
    sink: Sink,
    engine_config=None,
    clock: Optional[Clock] = None,
    connect_timeout: float = 5.0,
) -> Session:
    """Attach a SUT to the driver queues and sink.

    In-process mode runs the reference engine on its own threads; remote mode
    dials ``desc.address`` and performs the HELLO handshake.
    """
    if len(queues) != desc.sources:
        raise ValueError(f"SUT has {desc.sources} sources but {len(queues)} queues were given")
    clock = clock or sink.clock
    if desc.mode is SutMode.IN_PROCESS:
        from .engine import EngineConfig, ReferenceEngine

        engine = ReferenceEngine(engine_config or EngineConfig(), clock)
        return InProcessSession(engine, queues, sink)
    host, port = parse_address(desc.address)
    sock = socket.create_connection((host, port), timeout=connect_timeout)
    try:
        handshake(sock, desc.sources)
    except BaseException:
        sock.close()
        raise
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return RemoteSession(sock, queues, sink, clock)
