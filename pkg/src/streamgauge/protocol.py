"""Length-prefixed binary framing between the driver and an out-of-process SUT.

Frame: ``u32 length | u8 type | body``, little-endian; ``length`` counts the
type byte plus the body. Event times travel in the driver's clock domain
(nanoseconds since the experiment epoch) so windows align exactly as they do
in-process. Ingest times in OUTPUT frames are raw ``CLOCK_MONOTONIC``
nanoseconds, which every process on one host shares; the driver rebases them.
"""

from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

from .core import EVENT_DTYPE, NO_TIME

PROTOCOL_VERSION = 1


class FrameType(enum.IntEnum):
    HELLO = 0x01
    PULL = 0x02
    EVENTS = 0x03
    OUTPUT = 0x04
    EOS = 0x05
    BYE = 0x06


class QueryKind(enum.IntEnum):
    AGG = 0
    JOIN = 1


class ProtocolError(RuntimeError):
    pass


class HandshakeVersionMismatch(ProtocolError):
    pass


WIRE_EVENT = np.dtype(
    [
        ("stream", "u1"),
        ("user_id", "<u8"),
        ("gem_pack_id", "<u8"),
        ("price", "<u8"),
        ("event_time", "<u8"),
        ("seq", "<u8"),
    ]
)
assert WIRE_EVENT.itemsize == 41

_HEADER = struct.Struct("<IB")
_HELLO = struct.Struct("<HH")
_PULL = struct.Struct("<HI")
_EVENTS = struct.Struct("<HI")
# OUTPUT payloads: agg (gem_pack_id, sum_price, window_start); join (user_id, gem_pack_id, price)
_OUT_AGG = struct.Struct("<BQqqQQ")
_OUT_JOIN = struct.Struct("<BQQQQQ")


@dataclass(frozen=True)
class Hello:
    version: int
    n_sources: int


@dataclass(frozen=True)
class Pull:
    source_id: int
    max_n: int


@dataclass(frozen=True)
class Events:
    source_id: int
    events: np.ndarray  # EVENT_DTYPE; event times in the driver's clock domain


@dataclass(frozen=True)
class Output:
    query: QueryKind
    payload: tuple
    max_event_time: int
    max_ingest_time: int


@dataclass(frozen=True)
class Eos:
    pass


@dataclass(frozen=True)
class Bye:
    pass


Message = Union[Hello, Pull, Events, Output, Eos, Bye]


def _frame(ftype: FrameType, body: bytes = b"") -> bytes:
    return _HEADER.pack(len(body) + 1, int(ftype)) + body


def encode(msg: Message) -> bytes:
    if isinstance(msg, Hello):
        return _frame(FrameType.HELLO, _HELLO.pack(msg.version, msg.n_sources))
    if isinstance(msg, Pull):
        return _frame(FrameType.PULL, _PULL.pack(msg.source_id, msg.max_n))
    if isinstance(msg, Events):
        ev = msg.events
        wire = np.empty(len(ev), dtype=WIRE_EVENT)
        for name in WIRE_EVENT.names:
            wire[name] = ev[name]
        return _frame(FrameType.EVENTS, _EVENTS.pack(msg.source_id, len(ev)) + wire.tobytes())
    if isinstance(msg, Output):
        packer = _OUT_AGG if msg.query == QueryKind.AGG else _OUT_JOIN
        body = packer.pack(int(msg.query), *msg.payload, msg.max_event_time, msg.max_ingest_time)
        return _frame(FrameType.OUTPUT, body)
    if isinstance(msg, Eos):
        return _frame(FrameType.EOS)
    if isinstance(msg, Bye):
        return _frame(FrameType.BYE)
    raise TypeError(f"cannot encode {type(msg).__name__}")


def decode(ftype: int, body: bytes) -> Message:
    try:
        ftype = FrameType(ftype)
    except ValueError:
        raise ProtocolError(f"unknown frame type 0x{ftype:02x}") from None
    if ftype is FrameType.HELLO:
        return Hello(*_HELLO.unpack(body))
    if ftype is FrameType.PULL:
        return Pull(*_PULL.unpack(body))
    if ftype is FrameType.EVENTS:
        source_id, n = _EVENTS.unpack_from(body)
        raw = body[_EVENTS.size:]
        if len(raw) != n * WIRE_EVENT.itemsize:
            raise ProtocolError("EVENTS body length does not match count")
        wire = np.frombuffer(raw, dtype=WIRE_EVENT)
        ev = np.zeros(n, dtype=EVENT_DTYPE)
        for name in WIRE_EVENT.names:
            ev[name] = wire[name]
        ev["ingest_time"] = NO_TIME
        return Events(source_id, ev)
    if ftype is FrameType.OUTPUT:
        query = QueryKind(body[0])
        fields = (_OUT_AGG if query == QueryKind.AGG else _OUT_JOIN).unpack(body)
        return Output(query, tuple(fields[1:4]), fields[4], fields[5])
    if ftype is FrameType.EOS:
        return Eos()
    return Bye()


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf += chunk
    return bytes(buf)


def read_message(sock: socket.socket) -> Message:
    length, ftype = _HEADER.unpack(_recv_exact(sock, _HEADER.size))
    if length < 1:
        raise ProtocolError("frame length must include the type byte")
    body = _recv_exact(sock, length - 1) if length > 1 else b""
    return decode(ftype, body)


def send_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode(msg))


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {address!r}")
    return host, int(port)
