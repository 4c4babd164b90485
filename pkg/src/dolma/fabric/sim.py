"""Deterministic simulated fabric driven by a virtual clock.

Each channel is an independent FIFO server: an operation starts when both its
issue time has arrived and the previous operation on the channel has
finished, and occupies the channel for its modelled latency. Byte effects are
applied at submission, which is no later than the completion event.
"""
from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field

from ..errors import FabricError
from ..memnode.region import RegionState
from .base import Fabric
from .clock import VirtualClock
from .latency import LatencyModel
from .types import Completion, FabricOp, OpKind, RemoteAddr, Status


@dataclass
class _Channel:
    busy_until: float = 0.0
    queue: deque = field(default_factory=deque)  # signaled completions, time order
    by_id: dict = field(default_factory=dict)


class SimFabric(Fabric):
    def __init__(self, capacity: int, model: LatencyModel | None = None, clock: VirtualClock | None = None,
                 node_id: int = 0):
        super().__init__()
        self.region = RegionState(capacity)
        self.capacity = capacity
        self.model = model or LatencyModel.default()
        self.max_transfer_bytes = self.model.max_transfer_bytes
        self.clock = clock or VirtualClock()
        self.node_id = node_id
        self._channels: dict[int, _Channel] = {}
        self._lock = threading.RLock()
        self._faults: list = []

    def _chan(self, channel: int) -> _Channel:
        ch = self._channels.get(channel)
        if ch is None:
            ch = self._channels[channel] = _Channel()
        return ch

    def inject_remote_error(self, kind: OpKind | None = None, count: int = 1) -> None:
        """Make the next ``count`` matching ops complete with REMOTE_ERROR and no effect."""
        with self._lock:
            self._faults.extend([kind] * count)

    def _take_fault(self, op: FabricOp) -> bool:
        for i, kind in enumerate(self._faults):
            if kind is None or kind is op.kind:
                del self._faults[i]
                return True
        return False

    def _apply(self, op: FabricOp):
        off = op.remote.offset
        if op.kind is OpKind.READ:
            self.region.read_into(off, op.local)
        elif op.kind is OpKind.WRITE:
            self.region.write(off, op.local)
        elif op.kind is OpKind.ATOMIC_CAS:
            return self.region.cas(off, op.compare, op.value)
        else:
            return self.region.fadd(off, op.value)
        return None

    def _submit(self, channel: int, op: FabricOp, issue_at):
        with self._lock:
            ch = self._chan(channel)
            status, value, error = Status.OK, None, None
            if self._take_fault(op):
                status, error = Status.REMOTE_ERROR, "REMOTE_ERROR"
            else:
                try:
                    value = self._apply(op)
                except FabricError as exc:
                    status, error = Status.REMOTE_ERROR, exc.code
            start = max(self.clock.now() if issue_at is None else issue_at, ch.busy_until)
            done = start + self.model.estimate(op.kind, op.pattern, op.length)
            ch.busy_until = done
            c = Completion(op.op_id, status, done, value, error, channel)
            ch.by_id[op.op_id] = c
            if op.signaled:
                ch.queue.append(c)

    def poll(self, channel: int, max: int = 16) -> list[Completion]:
        out = []
        with self._lock:
            ch = self._chan(channel)
            now = self.clock.now()
            while ch.queue and len(out) < max and ch.queue[0].completed_at <= now:
                c = ch.queue.popleft()
                ch.by_id.pop(c.op_id, None)
                out.append(c)
        return out

    def wait(self, channel: int, op_id: int) -> Completion:
        """Consume the completion of ``op_id``; the caller's clock decides when it is observed."""
        with self._lock:
            ch = self._chan(channel)
            c = ch.by_id.pop(op_id, None)
            if c is None:
                raise KeyError(f"op {op_id} on channel {channel} is unknown or already retrieved")
            try:
                ch.queue.remove(c)
            except ValueError:
                pass
            return c

    def completion_time(self, channel: int, op_id: int) -> float | None:
        with self._lock:
            c = self._chan(channel).by_id.get(op_id)
            return None if c is None else c.completed_at

    def busy_until(self, channel: int) -> float:
        with self._lock:
            return self._chan(channel).busy_until

    def remote_alloc(self, size: int) -> RemoteAddr:
        with self._lock:
            return RemoteAddr(self.node_id, self.region.alloc(size))

    def remote_free(self, addr: RemoteAddr) -> None:
        with self._lock:
            self.region.free(addr.offset)

    def snapshot(self, path) -> None:
        self.region.snapshot(path)

    def contents(self) -> bytes:
        return bytes(self.region.backing)
