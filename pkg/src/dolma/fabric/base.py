from __future__ import annotations

import threading
from collections import Counter

from ..errors import ERRORS_BY_CODE, Misaligned, OutOfBounds, Oversized, RemoteError
from .types import Completion, FabricOp, OpKind, Pattern, RemoteAddr

ATOMIC_CHANNEL = -2


class Fabric:
    """Common surface of the simulated and TCP backends.

    Subclasses implement ``_submit``, ``poll``, ``wait``, ``completion_time``,
    ``remote_alloc`` and ``remote_free``; validation and accounting live here.
    """

    capacity: int
    model = None
    clock = None
    max_transfer_bytes: int

    def __init__(self):
        self.op_counts: Counter = Counter()
        self.op_bytes: Counter = Counter()
        self._stats_lock = threading.Lock()
        self._next_ids: dict[int, int] = {}
        self._id_lock = threading.Lock()

    def _next_op_id(self, channel: int) -> int:
        with self._id_lock:
            n = self._next_ids.get(channel, 0) + 1
            self._next_ids[channel] = n
            return n

    def validate(self, op: FabricOp) -> None:
        if op.kind.is_atomic:
            if op.length != 8:
                raise OutOfBounds("atomics operate on exactly 8 bytes")
            if op.remote.offset % 8:
                raise Misaligned(f"offset {op.remote.offset} is not 8-byte aligned")
        elif op.length < 1:
            raise OutOfBounds("length must be >= 1")
        if op.length > self.max_transfer_bytes:
            raise Oversized(f"{op.length} bytes exceeds max transfer of {self.max_transfer_bytes}")
        if op.remote.offset < 0 or op.remote.offset + op.length > self.capacity:
            raise OutOfBounds(
                f"[{op.remote.offset}, {op.remote.offset + op.length}) outside region of {self.capacity} bytes")
        if op.local is not None and len(op.local) != op.length:
            raise ValueError("local buffer length does not match op length")

    def submit(self, channel: int, op: FabricOp, issue_at: float | None = None) -> int:
        self.validate(op)
        op.op_id = self._next_op_id(channel)
        with self._stats_lock:
            self.op_counts[op.kind.value] += 1
            self.op_bytes[op.kind.value] += op.length
        self._submit(channel, op, issue_at)
        return op.op_id

    def fence(self, channel: int) -> None:
        # Both backends serve a channel in FIFO order, so every op submitted
        # before this point completes before any later op on the channel starts.
        return None

    # -- synchronous helpers ---------------------------------------------

    def wait_ok(self, channel: int, op_id: int) -> Completion:
        c = self.wait(channel, op_id)
        if not c.ok:
            raise ERRORS_BY_CODE.get(c.error, RemoteError)(f"op {op_id} failed: {c.error}")
        return c

    def atomic_cas(self, addr: RemoteAddr, expected: int, desired: int, channel: int = ATOMIC_CHANNEL) -> int:
        op_id = self.submit(channel, FabricOp.cas(addr, expected, desired))
        return self.wait_ok(channel, op_id).value

    def atomic_fadd(self, addr: RemoteAddr, addend: int, channel: int = ATOMIC_CHANNEL) -> int:
        op_id = self.submit(channel, FabricOp.fadd(addr, addend))
        return self.wait_ok(channel, op_id).value

    def read_sync(self, addr: RemoteAddr, length: int, channel: int = 0,
                  pattern: Pattern = Pattern.SEQ) -> bytes:
        buf = bytearray(length)
        view = memoryview(buf)
        ids = []
        for pos in range(0, length, self.max_transfer_bytes):
            chunk = view[pos:pos + self.max_transfer_bytes]
            ids.append(self.submit(channel, FabricOp.read(addr + pos, chunk, pattern)))
        for op_id in ids:
            self.wait_ok(channel, op_id)
        return bytes(buf)

    def write_sync(self, addr: RemoteAddr, data, channel: int = 0, pattern: Pattern = Pattern.SEQ) -> None:
        view = memoryview(data).cast("B")
        ids = [self.submit(channel, FabricOp.write(addr + pos, view[pos:pos + self.max_transfer_bytes], pattern))
               for pos in range(0, len(view), self.max_transfer_bytes)]
        for op_id in ids:
            self.wait_ok(channel, op_id)

    def stats(self) -> dict:
        with self._stats_lock:
            return {"ops": dict(self.op_counts), "bytes": dict(self.op_bytes)}

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

