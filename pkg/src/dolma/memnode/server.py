"""TCP memory node: hosts a RegionState and executes requests without app logic."""
from __future__ import annotations

import logging
import os
import socket
import socketserver
import threading
from pathlib import Path

from ..errors import FabricError, RemoteError, WIRE_CODES
from . import wire
from .region import RegionState
from .wire import Opcode

log = logging.getLogger(__name__)

MIN_CAPACITY = 1 << 20
IO_ERRNO = 6
BAD_REQUEST_ERRNO = 7


def execute(region: RegionState, req: wire.Frame, snapshot_dir=None) -> wire.Frame:
    """Apply one request to ``region`` and build its response frame."""
    try:
        op = req.base_opcode
        if op is Opcode.PING:
            return wire.response(req, offset=region.capacity)
        if op is Opcode.ALLOC:
            start = region.alloc(req.length)
            return wire.response(req, offset=start, length=req.length)
        if op is Opcode.FREE:
            region.free(req.offset)
            return wire.response(req)
        if op is Opcode.READ:
            data = region.read(req.offset, req.length)
            return wire.response(req, length=len(data), payload=data)
        if op is Opcode.WRITE:
            region.write(req.offset, req.payload)
            return wire.response(req, length=len(req.payload))
        if op is Opcode.CAS:
            if len(req.payload) != 16:
                return wire.error_response(req, BAD_REQUEST_ERRNO)
            old = region.cas(req.offset, wire.unpack_word(req.payload[:8]), wire.unpack_word(req.payload[8:]))
            return wire.response(req, length=8, payload=wire.pack_word(old))
        if op is Opcode.FADD:
            if len(req.payload) != 8:
                return wire.error_response(req, BAD_REQUEST_ERRNO)
            old = region.fadd(req.offset, wire.unpack_word(req.payload))
            return wire.response(req, length=8, payload=wire.pack_word(old))
        if op is Opcode.SNAPSHOT:
            path = Path(req.payload.decode("utf-8"))
            if snapshot_dir is not None and not path.is_absolute():
                path = Path(snapshot_dir) / path
            region.snapshot(path)
            return wire.response(req)
    except RemoteError:
        return wire.error_response(req, IO_ERRNO)
    except FabricError as exc:
        return wire.error_response(req, WIRE_CODES.get(type(exc), BAD_REQUEST_ERRNO))
    except (ValueError, UnicodeDecodeError):
        return wire.error_response(req, BAD_REQUEST_ERRNO)
    return wire.error_response(req, BAD_REQUEST_ERRNO)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        node: MemoryNode = self.server.node
        while True:
            try:
                req = wire.read_frame(sock)
            except (ConnectionError, OSError):
                # partial frame on drop is discarded
                return
            except wire.ProtocolError as exc:
                log.warning("closing connection: %s", exc)
                return
            if req.is_response:
                resp = wire.error_response(req, BAD_REQUEST_ERRNO)
            else:
                resp = execute(node.region, req, node.snapshot_dir)
            try:
                sock.sendall(resp.encode())
            except OSError:
                return


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class MemoryNode:
    """A memory node bound to ``(host, port)``; port 0 picks a free port."""

    def __init__(self, host="127.0.0.1", port=0, capacity=64 << 20, snapshot_dir=None, region=None):
        if region is None:
            if capacity < MIN_CAPACITY:
                raise ValueError(f"capacity must be >= {MIN_CAPACITY} bytes")
            region = RegionState(capacity)
        self.region = region
        self.snapshot_dir = snapshot_dir
        self._server = _Server((host, port), _Handler)
        self._server.node = self
        self._thread = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def serve_forever(self):
        self._server.serve_forever()

    def start(self) -> "MemoryNode":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def shutdown(self):
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown()


def serve(bind_address: str, capacity: int, snapshot_dir=None, restore=None) -> None:
    host, _, port = bind_address.rpartition(":")
    region = RegionState.restore(restore) if restore else None
    if snapshot_dir:
        os.makedirs(snapshot_dir, exist_ok=True)
    node = MemoryNode(host or "0.0.0.0", int(port), capacity, snapshot_dir, region)
    log.info("memnode listening on %s:%d (%d bytes)", *node.address, node.region.capacity)
    try:
        node.serve_forever()
    finally:
        node._server.server_close()
