"""Serve the reference engine as an out-of-process SUT over the wire protocol.

The SUT side pulls: a network thread keeps a small local prefetch buffer per
source topped up with PULL requests, so backpressure from the engine still
reaches the driver queues. Outputs are written back as OUTPUT frames.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from typing import Optional

from .core import Clock
from .driver_queue import DriverQueue
from .engine import EngineConfig, ReferenceEngine
from .protocol import (
    PROTOCOL_VERSION,
    Bye,
    Eos,
    Events,
    Hello,
    Output,
    ProtocolError,
    Pull,
    QueryKind,
    encode,
    read_message,
    send_message,
)

log = logging.getLogger(__name__)


class _WireSink:
    """Engine-facing sink that forwards outputs as OUTPUT frames."""

    def __init__(self, sock: socket.socket, lock: threading.Lock):
        self.sock = sock
        self.lock = lock

    def emit_many(self, query, payloads, max_event_time, max_ingest_time) -> int:
        n = len(payloads)
        et = max_event_time if hasattr(max_event_time, "__len__") else [max_event_time] * n
        it = max_ingest_time if hasattr(max_ingest_time, "__len__") else [max_ingest_time] * n
        frames = b"".join(
            _encode_output(query, p, int(e), int(i)) for p, e, i in zip(payloads, et, it)
        )
        with self.lock:
            self.sock.sendall(frames)
        return n


def _encode_output(query, payload, et, it) -> bytes:
    return encode(Output(QueryKind(query), tuple(int(x) for x in payload), et, it))


class SutConnection:
    """One driver connection served by a fresh reference engine."""

    def __init__(self, sock: socket.socket, config: EngineConfig, prefetch: int = 4096, pull_size: int = 1024):
        self.sock = sock
        self.config = config
        self.prefetch = prefetch
        self.pull_size = pull_size
        self.lock = threading.Lock()
        self.engine: Optional[ReferenceEngine] = None
        self.queues: list[DriverQueue] = []
        self._bye = threading.Event()

    def serve(self) -> None:
        hello = read_message(self.sock)
        if not isinstance(hello, Hello):
            raise ProtocolError("expected HELLO")
        send_message(self.sock, Hello(PROTOCOL_VERSION, hello.n_sources))
        if hello.version != PROTOCOL_VERSION:
            self.sock.close()
            return
        n = hello.n_sources
        self.queues = [DriverQueue(name=f"sut-{i}") for i in range(n)]
        # ingest stamps use the host's raw monotonic clock; the driver rebases them
        self.engine = ReferenceEngine(self.config, Clock(epoch_ns=0))
        sink = _WireSink(self.sock, self.lock)
        engine_thread = threading.Thread(target=self._run_engine, args=(sink,), daemon=True)
        engine_thread.start()
        try:
            self._pull_loop(n)
        except (OSError, ConnectionError):
            self.engine.stop()
        engine_thread.join()

    def _run_engine(self, sink) -> None:
        self.engine.run(self.queues, sink)
        if not self._bye.is_set():
            try:
                with self.lock:
                    send_message(self.sock, Bye())
            except OSError:
                pass

    def _pull_loop(self, n: int) -> None:
        eos = False
        while not eos:
            idle = True
            for i, q in enumerate(self.queues):
                if q.depth >= self.prefetch:
                    continue
                with self.lock:
                    send_message(self.sock, Pull(i, self.pull_size))
                msg = read_message(self.sock)
                if isinstance(msg, Events):
                    if len(msg.events):
                        q.offer_batch(msg.events)
                        idle = False
                elif isinstance(msg, Eos):
                    eos = True
                    break
                elif isinstance(msg, Bye):
                    self._bye.set()
                    self.engine.stop()
                    return
            if idle and not eos:
                time.sleep(0.0005)
        for q in self.queues:
            q.close()
        # wait for the driver's closing BYE
        while True:
            msg = read_message(self.sock)
            if isinstance(msg, Bye):
                self._bye.set()
                return


class RemoteSutServer:
    """TCP server running one reference engine per accepted connection."""

    def __init__(self, config: EngineConfig, host: str = "127.0.0.1", port: int = 0):
        self.config = config
        self.listener = socket.create_server((host, port))
        self.address = "%s:%d" % self.listener.getsockname()[:2]
        self._thread: Optional[threading.Thread] = None
        self._closed = False

    def start(self) -> "RemoteSutServer":
        self._thread = threading.Thread(target=self._accept_loop, name="sut-server", daemon=True)
        self._thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._closed:
            try:
                sock, _ = self.listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            threading.Thread(target=self._serve_one, args=(sock,), daemon=True).start()

    def _serve_one(self, sock: socket.socket) -> None:
        try:
            SutConnection(sock, self.config).serve()
        except (OSError, ConnectionError, ProtocolError) as exc:
            log.info("SUT connection ended: %s", exc)
        finally:
            sock.close()

    def close(self) -> None:
        self._closed = True
        self.listener.close()
