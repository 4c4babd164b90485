"""Fabric backend that talks to a memory node over TCP, one connection per channel."""
from __future__ import annotations

import socket
import threading
from collections import deque

from ..errors import RemoteError, WIRE_ERRORS
from ..memnode import wire
from ..memnode.wire import Opcode
from .base import Fabric
from .clock import WallClock
from .latency import GiB
from .types import Completion, FabricOp, OpKind, RemoteAddr, Status

_OPCODES = {OpKind.READ: Opcode.READ, OpKind.WRITE: Opcode.WRITE,
            OpKind.ATOMIC_CAS: Opcode.CAS, OpKind.ATOMIC_FADD: Opcode.FADD}


def _connect(address) -> socket.socket:
    sock = socket.create_connection(address)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


def _error_code(frame: wire.Frame) -> str:
    return WIRE_ERRORS.get(frame.offset, RemoteError).code


class _Connection:
    """A channel: requests go out in order, a reader thread collects responses."""

    def __init__(self, fabric: "TcpFabric", channel: int):
        self.fabric = fabric
        self.channel = channel
        self.sock = _connect(fabric.address)
        self.send_lock = threading.Lock()
        self.cond = threading.Condition()
        self.inflight: dict[int, FabricOp] = {}
        self.done: dict[int, Completion] = {}
        self.queue: deque = deque()
        self.closed = False
        self.reader = threading.Thread(target=self._read_loop, daemon=True)
        self.reader.start()

    def send(self, op: FabricOp) -> None:
        opcode = _OPCODES[op.kind]
        if op.kind is OpKind.WRITE:
            payload, length = bytes(op.local), op.length
        elif op.kind is OpKind.ATOMIC_CAS:
            payload, length = wire.pack_word(op.compare) + wire.pack_word(op.value), 16
        elif op.kind is OpKind.ATOMIC_FADD:
            payload, length = wire.pack_word(op.value), 8
        else:
            payload, length = b"", op.length
        frame = wire.request(opcode, op.op_id, op.remote.offset, length, payload)
        with self.cond:
            self.inflight[op.op_id] = op
        with self.send_lock:
            self.sock.sendall(frame.encode())

    def _read_loop(self):
        try:
            while True:
                frame = wire.read_frame(self.sock)
                self._complete(frame)
        except (ConnectionError, OSError, wire.ProtocolError):
            with self.cond:
                self.closed = True
                for op_id in list(self.inflight):
                    op = self.inflight.pop(op_id)
                    c = Completion(op_id, Status.REMOTE_ERROR, self.fabric.clock.now(), None,
                                   "REMOTE_ERROR", self.channel)
                    self._record(op, c)
                self.cond.notify_all()

    def _record(self, op: FabricOp, c: Completion):
        self.done[c.op_id] = c
        if op.signaled:
            self.queue.append(c)

    def _complete(self, frame: wire.Frame):
        with self.cond:
            op = self.inflight.get(frame.request_id)
        if op is None:
            return
        status, value, error = Status.OK, None, None
        if frame.is_error:
            status, error = Status.REMOTE_ERROR, _error_code(frame)
        elif op.kind is OpKind.READ:
            if len(frame.payload) != op.length:
                status, error = Status.TRUNCATED, "TRUNCATED"
            else:
                op.local[:] = frame.payload
        elif op.kind.is_atomic:
            value = wire.unpack_word(frame.payload)
        c = Completion(op.op_id, status, self.fabric.clock.now(), value, error, self.channel)
        with self.cond:
            self.inflight.pop(frame.request_id, None)
            self._record(op, c)
            self.cond.notify_all()

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class TcpFabric(Fabric):
    """Client side of the memory-node protocol.

    ``capacity`` is learned from the PING response so requests can be bounds
    checked before they leave the compute node.
    """

    def __init__(self, address, clock=None, max_transfer_bytes: int = GiB, node_id: int = 0):
        super().__init__()
        if isinstance(address, str):
            host, _, port = address.rpartition(":")
            address = (host, int(port))
        self.address = tuple(address)
        self.clock = clock or WallClock()
        self.model = None
        self.max_transfer_bytes = max_transfer_bytes
        self.node_id = node_id
        self._control = _connect(self.address)
        self._control_lock = threading.Lock()
        self._control_id = 0
        self._conns: dict[int, _Connection] = {}
        self._conns_lock = threading.Lock()
        self.capacity = self._call(Opcode.PING).offset

    def _call(self, opcode: Opcode, offset=0, length=0, payload=b"") -> wire.Frame:
        with self._control_lock:
            self._control_id += 1
            req = wire.request(opcode, self._control_id, offset, length, payload)
            self._control.sendall(req.encode())
            resp = wire.read_frame(self._control)
        if resp.request_id != req.request_id:
            raise RemoteError("response out of order on control connection")
        if resp.is_error:
            raise WIRE_ERRORS.get(resp.offset, RemoteError)(f"{opcode.name} failed")
        return resp

    def _conn(self, channel: int) -> _Connection:
        with self._conns_lock:
            conn = self._conns.get(channel)
            if conn is None:
                conn = self._conns[channel] = _Connection(self, channel)
            return conn

    def _submit(self, channel, op, issue_at):
        self._conn(channel).send(op)

    def poll(self, channel: int, max: int = 16) -> list[Completion]:
        conn = self._conn(channel)
        out = []
        with conn.cond:
            while conn.queue and len(out) < max:
                c = conn.queue.popleft()
                conn.done.pop(c.op_id, None)
                out.append(c)
        return out

    def wait(self, channel: int, op_id: int, timeout: float | None = 30.0) -> Completion:
        conn = self._conn(channel)
        with conn.cond:
            if op_id not in conn.done and op_id not in conn.inflight:
                raise KeyError(f"op {op_id} on channel {channel} is unknown or already retrieved")
            if not conn.cond.wait_for(lambda: op_id in conn.done, timeout):
                raise RemoteError(f"timed out waiting for op {op_id}")
            c = conn.done.pop(op_id)
            try:
                conn.queue.remove(c)
            except ValueError:
                pass
            return c

    def completion_time(self, channel: int, op_id: int) -> float | None:
        conn = self._conn(channel)
        with conn.cond:
            c = conn.done.get(op_id)
            return None if c is None else c.completed_at

    def remote_alloc(self, size: int) -> RemoteAddr:
        if size < 1:
            raise ValueError("size must be >= 1")
        return RemoteAddr(self.node_id, self._call(Opcode.ALLOC, length=size).offset)

    def remote_free(self, addr: RemoteAddr) -> None:
        self._call(Opcode.FREE, offset=addr.offset)

    def ping(self) -> int:
        return self._call(Opcode.PING).offset

    def snapshot(self, path) -> None:
        data = str(path).encode("utf-8")
        self._call(Opcode.SNAPSHOT, length=len(data), payload=data)

    def contents(self) -> bytes:
        return self.read_sync(RemoteAddr(self.node_id, 0), self.capacity, channel=-1)

    def close(self) -> None:
        with self._conns_lock:
            conns, self._conns = list(self._conns.values()), {}
        for conn in conns:
            conn.close()
        self._control.close()

