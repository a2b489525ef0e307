"""E2-lite framing: an 18-byte header followed by a JSON payload.

Header (big-endian): magic "ZTRC" | version u8 | msg_type u8 |
correlation_id u64 | payload_len u32.
"""
from __future__ import annotations

import enum
import json
import socket
import struct
from dataclasses import dataclass

from ..errors import FrameError

MAGIC = b"ZTRC"
VERSION = 1
HEADER = struct.Struct(">4sBBQI")
HEADER_SIZE = HEADER.size  # 18
MAX_PAYLOAD = 64 << 20


class MsgType(enum.IntEnum):
    KEY_ISSUE = 1
    ENC_KPM = 2
    CONTROL = 3
    ACK = 4


@dataclass(frozen=True)
class E2Frame:
    msg_type: MsgType
    correlation_id: int
    payload: bytes = b""

    def encode(self) -> bytes:
        if not 0 <= self.correlation_id < 1 << 64:
            raise FrameError(f"correlation id {self.correlation_id} out of range")
        return HEADER.pack(MAGIC, VERSION, int(self.msg_type), self.correlation_id,
                           len(self.payload)) + self.payload

    def json(self):
        try:
            return json.loads(self.payload)
        except ValueError as exc:
            raise FrameError(f"payload is not JSON: {exc}") from exc

    @classmethod
    def from_json(cls, msg_type: MsgType, correlation_id: int, obj) -> "E2Frame":
        return cls(msg_type, correlation_id, json.dumps(obj, separators=(",", ":")).encode())


def parse_header(header: bytes) -> tuple[MsgType, int, int]:
    if len(header) != HEADER_SIZE:
        raise FrameError(f"short header: {len(header)} bytes")
    magic, version, msg_type, corr, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameError(f"unsupported frame version {version}")
    try:
        kind = MsgType(msg_type)
    except ValueError:
        raise FrameError(f"unknown message type {msg_type}") from None
    if length > MAX_PAYLOAD:
        raise FrameError(f"payload length {length} exceeds limit")
    return kind, corr, length


def decode(blob: bytes) -> E2Frame:
    """Decode exactly one frame; trailing or missing bytes are errors."""
    kind, corr, length = parse_header(blob[:HEADER_SIZE])
    payload = blob[HEADER_SIZE:]
    if len(payload) != length:
        raise FrameError(f"payload_len {length} != actual {len(payload)}")
    return E2Frame(kind, corr, payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise FrameError("connection closed mid-frame")
            return None
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> E2Frame | None:
    """Next frame from a stream socket, or None on clean EOF."""
    header = _recv_exact(sock, HEADER_SIZE)
    if header is None:
        return None
    kind, corr, length = parse_header(header)
    payload = _recv_exact(sock, length) if length else b""
    if payload is None:
        raise FrameError("connection closed mid-frame")
    return E2Frame(kind, corr, payload)


def write_frame(sock: socket.socket, frame: E2Frame) -> int:
    data = frame.encode()
    sock.sendall(data)
    return len(data)
