"""Binary framing for the memory-node protocol.

Every frame starts with a 30-byte big-endian header::

    magic "DLMA" | version u8 | opcode u8 | request_id u64 | offset u64 | length u64

followed by a payload. Which frames carry a payload is fixed per opcode:

=========  =========================  ===========================
opcode     request payload            OK response
=========  =========================  ===========================
ALLOC      none (length = size)       offset = start, length = size
FREE       none                       empty
READ       none (length = n)          n bytes
WRITE      length bytes               length = n, no payload
CAS        16 B: expected, desired    8 B previous word
FADD       8 B addend (mod 2**64)     8 B previous word
PING       none                       PONG, offset = capacity
SNAPSHOT   utf-8 path                 empty
=========  =========================  ===========================

A response echoes the request id and sets the high bit of the opcode. An
error response uses opcode ``0xFF`` with the error number in ``offset`` and
no payload.
"""
from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass

MAGIC = b"DLMA"
VERSION = 1
HEADER = struct.Struct(">4sBBQQQ")
HEADER_SIZE = HEADER.size  # 30
RESPONSE_BIT = 0x80
ERROR_OPCODE = 0xFF


class Opcode(enum.IntEnum):
    ALLOC = 0
    FREE = 1
    READ = 2
    WRITE = 3
    CAS = 4
    FADD = 5
    PING = 6
    SNAPSHOT = 7


_REQUEST_PAYLOAD = {Opcode.WRITE, Opcode.CAS, Opcode.FADD, Opcode.SNAPSHOT}
_RESPONSE_PAYLOAD = {Opcode.READ, Opcode.CAS, Opcode.FADD}


class ProtocolError(Exception):
    pass


@dataclass
class Frame:
    opcode: int
    request_id: int
    offset: int = 0
    length: int = 0
    payload: bytes = b""

    @property
    def is_error(self) -> bool:
        return self.opcode == ERROR_OPCODE

    @property
    def is_response(self) -> bool:
        return bool(self.opcode & RESPONSE_BIT)

    @property
    def base_opcode(self) -> Opcode:
        return Opcode(self.opcode & ~RESPONSE_BIT)

    def encode(self) -> bytes:
        return HEADER.pack(MAGIC, VERSION, self.opcode, self.request_id,
                           self.offset, self.length) + bytes(self.payload)


def payload_length(opcode: int, length: int) -> int:
    if opcode == ERROR_OPCODE:
        return 0
    base = Opcode(opcode & ~RESPONSE_BIT)
    carries = _RESPONSE_PAYLOAD if opcode & RESPONSE_BIT else _REQUEST_PAYLOAD
    return length if base in carries else 0


def request(opcode: Opcode, request_id: int, offset: int = 0, length: int = 0, payload: bytes = b"") -> Frame:
    return Frame(int(opcode), request_id, offset, length, payload)


def response(req: Frame, offset: int = 0, length: int = 0, payload: bytes = b"") -> Frame:
    return Frame(req.opcode | RESPONSE_BIT, req.request_id, offset, length, payload)


def error_response(req: Frame, errno: int) -> Frame:
    return Frame(ERROR_OPCODE, req.request_id, errno, 0)


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise ConnectionError("connection closed mid-frame" if got else "connection closed")
        got += k
    return bytes(buf)


def decode_header(raw: bytes) -> Frame:
    magic, version, opcode, rid, offset, length = HEADER.unpack(raw)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    if opcode != ERROR_OPCODE:
        try:
            Opcode(opcode & ~RESPONSE_BIT)
        except ValueError:
            raise ProtocolError(f"unknown opcode {opcode}") from None
    return Frame(opcode, rid, offset, length)


def read_frame(sock: socket.socket) -> Frame:
    frame = decode_header(recv_exact(sock, HEADER_SIZE))
    n = payload_length(frame.opcode, frame.length)
    if n:
        frame.payload = recv_exact(sock, n)
    return frame


def pack_word(value: int) -> bytes:
    return (value & ((1 << 64) - 1)).to_bytes(8, "big")


def unpack_word(raw: bytes) -> int:
    return int.from_bytes(raw[:8], "big")
