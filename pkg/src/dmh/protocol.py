"""Binary framing for the client/server exchange, byte accounting and transports.

Frame layout (little-endian, 20-byte header)::

    offset size field
    0      2    magic        b"DM"
    2      1    version      u8 (currently 1)
    3      1    msg_type     u8: 0 Init, 1 Forward, 2 Grad, 3 Metric, 4 Close
    4      4    client_id    u32
    8      8    step         u64
    16     4    payload_len  u32, bytes; always 8 * float count
    20     ...  payload      float64 values, little-endian

The header carries the payload length, so a byte stream is framed by
reading 20 bytes, then ``payload_len`` more.
"""
from __future__ import annotations

import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import (BadMagic, ProtocolError, TransportError, Truncation,
                     UnknownMessageType, VersionMismatch)

MAGIC = b"DM"
VERSION = 1
HEADER = struct.Struct("<2sBBIQI")
HEADER_SIZE = HEADER.size
FLOAT = np.dtype("<f8")

assert HEADER_SIZE == 20


class MsgType(IntEnum):
    INIT = 0
    FORWARD = 1
    GRAD = 2
    METRIC = 3
    CLOSE = 4


@dataclass(eq=False)
class WireMessage:
    msg_type: MsgType
    client_id: int
    step: int
    payload: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.msg_type = MsgType(self.msg_type)
        self.payload = np.ascontiguousarray(self.payload, dtype=FLOAT).reshape(-1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, WireMessage):
            return NotImplemented
        return (self.msg_type == other.msg_type and self.client_id == other.client_id
                and self.step == other.step and self.payload.tobytes() == other.payload.tobytes())

    @property
    def n_floats(self) -> int:
        return self.payload.size

    @property
    def wire_size(self) -> int:
        return HEADER_SIZE + 8 * self.payload.size


def encode_message(msg: WireMessage) -> bytes:
    body = msg.payload.astype(FLOAT, copy=False).tobytes()
    if not 0 <= msg.client_id < 2 ** 32 or not 0 <= msg.step < 2 ** 64:
        raise ProtocolError(f"client_id/step out of range: {msg.client_id}, {msg.step}")
    return HEADER.pack(MAGIC, VERSION, int(msg.msg_type), msg.client_id, msg.step, len(body)) + body


def decode_header(buf: bytes) -> tuple[MsgType, int, int, int]:
    """Validate a header; returns (msg_type, client_id, step, payload_len)."""
    if len(buf) < HEADER_SIZE:
        raise Truncation(f"header needs {HEADER_SIZE} bytes, got {len(buf)}")
    magic, version, mtype, client_id, step, length = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatch(f"version {version}, expected {VERSION}")
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise UnknownMessageType(f"unknown msg_type {mtype}") from None
    if length % 8:
        raise ProtocolError(f"payload_len {length} is not a multiple of 8")
    return mtype, client_id, step, length


def decode_message(buf: bytes) -> WireMessage:
    mtype, client_id, step, length = decode_header(buf)
    if len(buf) < HEADER_SIZE + length:
        raise Truncation(f"payload needs {length} bytes, got {len(buf) - HEADER_SIZE}")
    if len(buf) > HEADER_SIZE + length:
        raise ProtocolError(f"{len(buf) - HEADER_SIZE - length} trailing bytes after frame")
    payload = np.frombuffer(buf, dtype=FLOAT, count=length // 8, offset=HEADER_SIZE).copy()
    return WireMessage(mtype, client_id, step, payload)


# --- accounting -------------------------------------------------------------------

UP, DOWN = "client->server", "server->client"


class TransmissionLedger:
    """Cumulative bytes and floats per direction, plus one entry per message.

    Forward messages also book how many of their floats are activations and
    how many are labels, and how many samples they carry.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.bytes = {UP: 0, DOWN: 0}
        self.floats = {UP: 0, DOWN: 0}
        self.messages = {UP: 0, DOWN: 0}
        self.activation_floats = 0
        self.label_floats = 0
        self.samples = 0
        self.entries: list[tuple[str, int, str, int, int]] = []

    def record(self, direction: str, msg: WireMessage, wire_bytes: int,
               samples: int = 0, labels: int = 0) -> None:
        with self._lock:
            self.bytes[direction] += wire_bytes
            self.floats[direction] += msg.n_floats
            self.messages[direction] += 1
            if msg.msg_type == MsgType.FORWARD and direction == UP:
                self.samples += samples
                self.label_floats += labels
                self.activation_floats += msg.n_floats - labels
            self.entries.append((direction, msg.step, msg.msg_type.name, msg.n_floats, wire_bytes))

    def forward_floats_per_sample(self) -> float:
        if self.samples == 0:
            raise ValueError("ledger holds no completed forward step")
        return self.activation_floats / self.samples

    def dump(self, path: str | Path) -> None:
        lines = ["direction\tstep\ttype\tfloats\tbytes"]
        lines += ["\t".join(map(str, e)) for e in self.entries]
        Path(path).write_text("\n".join(lines) + "\n")

    def summary(self) -> dict:
        return {
            "bytes_up": self.bytes[UP], "bytes_down": self.bytes[DOWN],
            "floats_up": self.floats[UP], "floats_down": self.floats[DOWN],
            "messages_up": self.messages[UP], "messages_down": self.messages[DOWN],
            "activation_floats": self.activation_floats, "label_floats": self.label_floats,
            "samples": self.samples,
        }


# --- transports -------------------------------------------------------------------

class Transport:
    """Client end of a request/reply channel carrying encoded frames."""

    def send(self, data: bytes) -> None:
        raise NotImplementedError

    def recv(self) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass


class InProcessTransport(Transport):
    """Hands frames straight to ``handler(bytes) -> list[bytes]``; replies queue up in order."""

    def __init__(self, handler):
        self.handler = handler
        self.inbox: deque[bytes] = deque()

    def send(self, data: bytes) -> None:
        self.inbox.extend(self.handler(bytes(data)))

    def recv(self) -> bytes:
        if not self.inbox:
            raise TransportError("no reply pending")
        return self.inbox.popleft()


def _read_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            raise TransportError(f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes:
    head = _read_exact(sock, HEADER_SIZE)
    _, _, _, length = decode_header(head)
    return head + _read_exact(sock, length) if length else head


class StreamTransport(Transport):
    """Frames over a connected stream socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock

    @classmethod
    def connect(cls, host: str, port: int, timeout: float | None = 30.0) -> "StreamTransport":
        return cls(socket.create_connection((host, port), timeout=timeout))

    def send(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise TransportError(str(exc)) from exc

    def recv(self) -> bytes:
        try:
            return read_frame(self.sock)
        except OSError as exc:
            raise TransportError(str(exc)) from exc

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def serve_stream(handler, sock: socket.socket) -> None:
    """Server loop for one connection: read a frame, write every reply, until Close or EOF."""
    with sock:
        while True:
            try:
                frame = read_frame(sock)
            except (TransportError, OSError):
                return
            except ProtocolError:
                return
            replies = handler(frame)
            try:
                for r in replies:
                    sock.sendall(r)
            except OSError:
                return
            if frame[3] == MsgType.CLOSE:
                return


def socketpair_transport(handler) -> tuple[StreamTransport, threading.Thread]:
    """Local duplex byte stream with the server loop on a background thread."""
    client_sock, server_sock = socket.socketpair()
    thread = threading.Thread(target=serve_stream, args=(handler, server_sock), daemon=True)
    thread.start()
    return StreamTransport(client_sock), thread
