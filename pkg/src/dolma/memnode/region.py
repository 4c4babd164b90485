"""Byte region hosted by a memory node, with its allocation map."""
from __future__ import annotations

import struct
import threading
import zlib
from pathlib import Path

from .._ranges import RangeAllocator
from ..errors import Misaligned, OutOfBounds, RemoteError

MASK64 = (1 << 64) - 1
_SNAP_MAGIC = b"DLMS"
_SNAP_HEADER = struct.Struct("<4sBQQ")  # magic, version, capacity, n_allocs
_SNAP_ENTRY = struct.Struct("<QQ")


class RegionState:
    """Passive memory: bounds-checked byte copies, allocation, 64-bit atomics.

    Allocation zero-fills the returned range, so fresh objects read as zeros on
    every backend.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.backing = bytearray(capacity)
        self.allocator = RangeAllocator(capacity)
        self._alloc_lock = threading.Lock()
        self._atomic_lock = threading.Lock()

    def check(self, offset: int, length: int) -> None:
        if offset < 0 or length < 0 or offset + length > self.capacity:
            raise OutOfBounds(f"[{offset}, {offset + length}) outside region of {self.capacity} bytes")

    def alloc(self, size: int) -> int:
        with self._alloc_lock:
            start = self.allocator.alloc(size)
        self.backing[start:start + size] = bytes(size)
        return start

    def free(self, offset: int) -> None:
        with self._alloc_lock:
            self.allocator.free(offset)

    def read(self, offset: int, length: int) -> bytes:
        self.check(offset, length)
        return bytes(self.backing[offset:offset + length])

    def read_into(self, offset: int, dest: memoryview) -> None:
        self.check(offset, len(dest))
        dest[:] = memoryview(self.backing)[offset:offset + len(dest)]

    def write(self, offset: int, data) -> None:
        data = memoryview(data).cast("B")
        self.check(offset, len(data))
        self.backing[offset:offset + len(data)] = data

    def _word_checked(self, offset: int) -> None:
        if offset % 8:
            raise Misaligned(f"offset {offset} is not 8-byte aligned")
        self.check(offset, 8)

    def cas(self, offset: int, expected: int, desired: int) -> int:
        self._word_checked(offset)
        with self._atomic_lock:
            old = int.from_bytes(self.backing[offset:offset + 8], "little")
            if old == expected & MASK64:
                self.backing[offset:offset + 8] = (desired & MASK64).to_bytes(8, "little")
            return old

    def fadd(self, offset: int, addend: int) -> int:
        self._word_checked(offset)
        with self._atomic_lock:
            old = int.from_bytes(self.backing[offset:offset + 8], "little")
            self.backing[offset:offset + 8] = ((old + addend) & MASK64).to_bytes(8, "little")
            return old

    # -- snapshot ---------------------------------------------------------

    def snapshot(self, path) -> None:
        allocs = sorted(self.allocator.allocated.items())
        body = bytearray(_SNAP_HEADER.pack(_SNAP_MAGIC, 1, self.capacity, len(allocs)))
        for start, length in allocs:
            body += _SNAP_ENTRY.pack(start, length)
        body += self.backing
        body += struct.pack("<I", zlib.crc32(body))
        try:
            Path(path).write_bytes(body)
        except OSError as exc:
            raise RemoteError(f"snapshot to {path} failed: {exc}") from exc

    @classmethod
    def restore(cls, path) -> "RegionState":
        data = Path(path).read_bytes()
        if len(data) < _SNAP_HEADER.size + 4:
            raise RemoteError("snapshot truncated")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise RemoteError("snapshot checksum mismatch")
        magic, _version, capacity, n = _SNAP_HEADER.unpack_from(body)
        if magic != _SNAP_MAGIC:
            raise RemoteError("not a region snapshot")
        region = cls(capacity)
        pos = _SNAP_HEADER.size
        for _ in range(n):
            start, length = _SNAP_ENTRY.unpack_from(body, pos)
            pos += _SNAP_ENTRY.size
            region.allocator.reserve(start, length)
        region.backing[:] = body[pos:pos + capacity]
        return region
