"""Asynchronous application-level checkpoints with selective update.

A checkpoint file holds a header, the metadata table as JSON, and one blob
per object split into a LOCAL and a REMOTE section. Objects not written
since the previous checkpoint are not copied again: their blob is a
reference ``(path, file offset, length)`` into the file that physically
holds the bytes. Capture happens at an iteration barrier; encoding and
writing the file run on a background thread.

Layout (little-endian)::

    header   "DLCK" u16 version  u64 epoch  f64 unix time
    section  4-byte tag  u64 body length  u32 crc32(body)  body
             tags: META (JSON), LOCL, REMT
    blob     u64 object id  u64 home offset  u64 length  u8 kind
             kind 0: <length> bytes
             kind 1: u16 path length, path (utf-8), u64 file offset
"""
from __future__ import annotations

import io
import json
import os
import struct
import threading
import time
import zlib
from concurrent.futures import Future
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import CheckpointError
from .runtime import Runtime

MAGIC = b"DLCK"
VERSION = 1
DEFAULT_INTERVAL = 5

_HEADER = struct.Struct("<4sHQd")
_SECTION = struct.Struct("<4sQI")
_BLOB = struct.Struct("<QQQB")
_SECTIONS = {b"META": "metadata", b"LOCL": "local", b"REMT": "remote"}

FRESH, REFERENCE = 0, 1


@dataclass
class Blob:
    object_id: int
    home: int
    length: int
    data: Optional[bytes] = None          # fresh bytes
    ref_path: Optional[str] = None         # or where they live
    ref_offset: int = 0


@dataclass
class CheckpointFile:
    epoch: int
    timestamp: float
    metadata: dict
    local: list[Blob]
    remote: list[Blob]
    path: Optional[str] = None
    # object id -> (path, file offset, length) of the bytes, references resolved
    locations: dict = field(default_factory=dict)

    @property
    def blobs(self) -> list[Blob]:
        return self.local + self.remote


# -- encoding ---------------------------------------------------------------------

def _encode_blobs(blobs, base: int, path: str, locations: dict) -> bytes:
    """Serialise blobs; ``base`` is the file offset of the section body."""
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(blobs)))
    for b in blobs:
        kind = FRESH if b.data is not None else REFERENCE
        buf.write(_BLOB.pack(b.object_id, b.home, b.length, kind))
        if kind == FRESH:
            locations[b.object_id] = (path, base + buf.tell(), b.length)
            buf.write(b.data)
        else:
            raw = b.ref_path.encode()
            buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<Q", b.ref_offset))
            locations[b.object_id] = (b.ref_path, b.ref_offset, b.length)
    return buf.getvalue()


def encode(ck: CheckpointFile, path: str) -> bytes:
    """Build the file image; fills ``ck.locations`` with where each object's bytes end up."""
    out = io.BytesIO()
    out.write(_HEADER.pack(MAGIC, VERSION, ck.epoch, ck.timestamp))
    meta = json.dumps(ck.metadata, sort_keys=True).encode()
    for tag, body in ((b"META", meta), (b"LOCL", ck.local), (b"REMT", ck.remote)):
        if not isinstance(body, bytes):
            body = _encode_blobs(body, out.tell() + _SECTION.size, path, ck.locations)
        out.write(_SECTION.pack(tag, len(body), zlib.crc32(body)))
        out.write(body)
    return out.getvalue()


def _decode_blobs(body: bytes, base: int, path: str, section: str) -> tuple[list[Blob], dict]:
    blobs, locations = [], {}
    try:
        (count,) = struct.unpack_from("<I", body, 0)
        pos = 4
        for _ in range(count):
            oid, home, length, kind = _BLOB.unpack_from(body, pos)
            pos += _BLOB.size
            if kind == FRESH:
                blobs.append(Blob(oid, home, length, data=body[pos:pos + length]))
                locations[oid] = (path, base + pos, length)
                pos += length
            elif kind == REFERENCE:
                (n,) = struct.unpack_from("<H", body, pos)
                ref = body[pos + 2:pos + 2 + n].decode()
                (off,) = struct.unpack_from("<Q", body, pos + 2 + n)
                pos += 2 + n + 8
                blobs.append(Blob(oid, home, length, ref_path=ref, ref_offset=off))
                locations[oid] = (ref, off, length)
            else:
                raise CheckpointError(f"{path}: unknown blob kind {kind} in {section} section")
    except struct.error:
        raise CheckpointError(f"{path}: truncated {section} section") from None
    return blobs, locations


def read_checkpoint(path) -> CheckpointFile:
    """Parse and verify a checkpoint file (checksums are checked per section)."""
    path = str(path)
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint file {path} not found") from None
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, epoch, ts = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic in header")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} in header")
    pos = _HEADER.size
    parts: dict = {}
    while pos < len(raw):
        if pos + _SECTION.size > len(raw):
            raise CheckpointError(f"{path}: truncated section header")
        tag, length, crc = _SECTION.unpack_from(raw, pos)
        name = _SECTIONS.get(tag, tag.decode(errors="replace"))
        pos += _SECTION.size
        body = raw[pos:pos + length]
        if len(body) != length or zlib.crc32(body) != crc:
            raise CheckpointError(f"{path}: checksum mismatch in {name} section")
        parts[tag] = (pos, body)
        pos += length
    for tag, name in _SECTIONS.items():
        if tag not in parts:
            raise CheckpointError(f"{path}: missing {name} section")
    try:
        meta = json.loads(parts[b"META"][1])
    except ValueError:
        raise CheckpointError(f"{path}: undecodable metadata section") from None
    local, loc_a = _decode_blobs(parts[b"LOCL"][1], parts[b"LOCL"][0], path, "local")
    remote, loc_b = _decode_blobs(parts[b"REMT"][1], parts[b"REMT"][0], path, "remote")
    return CheckpointFile(epoch, ts, meta, local, remote, path, {**loc_a, **loc_b})


class _Resolver:
    """Fetch blob bytes, opening and verifying referenced files once each."""

    def __init__(self):
        self._files: dict[str, bytes] = {}

    def bytes_at(self, ref_path: str, offset: int, length: int) -> bytes:
        if ref_path not in self._files:
            if not Path(ref_path).exists():
                raise CheckpointError(f"unresolvable checkpoint chain: predecessor {ref_path} is missing")
            read_checkpoint(ref_path)          # verifies its checksums
            self._files[ref_path] = Path(ref_path).read_bytes()
        data = self._files[ref_path][offset:offset + length]
        if len(data) != length:
            raise CheckpointError(f"unresolvable checkpoint chain: {ref_path} has no blob at {offset}")
        return data

    def data(self, blob: Blob) -> bytes:
        return blob.data if blob.data is not None else self.bytes_at(blob.ref_path, blob.ref_offset, blob.length)


# -- checkpointing -----------------------------------------------------------------

@dataclass
class CheckpointTicket:
    epoch: int
    path: str
    fresh: list[int] = field(default_factory=list)
    referenced: list[int] = field(default_factory=list)
    coalesced: bool = False
    _future: Future = field(default_factory=Future, repr=False)

    def wait(self, timeout: Optional[float] = None) -> "CheckpointTicket":
        self._future.result(timeout)
        return self

    def done(self) -> bool:
        return self._future.done()

    @property
    def error(self) -> Optional[BaseException]:
        return self._future.exception() if self._future.done() else None

    @property
    def ok(self) -> bool:
        return self.done() and self.error is None


class Checkpointer:
    """Per-runtime checkpoint state: epoch counter and where every object's bytes last landed."""

    def __init__(self, runtime: Runtime, interval: int = DEFAULT_INTERVAL):
        if interval < 1:
            raise CheckpointError("checkpoint interval must be >= 1")
        self.runtime = runtime
        self.interval = interval
        self.epoch = 0
        self.locations: dict = {}
        self._inflight: Optional[CheckpointTicket] = None
        self._deferred: Optional[CheckpointTicket] = None
        self._lock = threading.Lock()
        self.history: list[CheckpointTicket] = []

    @classmethod
    def for_runtime(cls, runtime: Runtime) -> "Checkpointer":
        ck = getattr(runtime, "_checkpointer", None)
        if ck is None:
            ck = runtime._checkpointer = cls(runtime)
        return ck

    @property
    def busy(self) -> bool:
        return self._inflight is not None and not self._inflight.done()

    def request(self, path) -> CheckpointTicket:
        """Checkpoint now, or at the next barrier if a checkpoint is still being written."""
        with self._lock:
            if self.busy:
                if self._deferred is None:
                    self._deferred = CheckpointTicket(-1, str(path), coalesced=True)
                else:
                    self._deferred.path = str(path)
                return self._deferred
            return self._capture(str(path))

    def barrier(self, iteration: Optional[int] = None, path_for=None) -> Optional[CheckpointTicket]:
        """Call at iteration boundaries: runs a deferred request, or an interval checkpoint."""
        with self._lock:
            if self._deferred is not None and not self.busy:
                t, self._deferred = self._deferred, None
                return self._capture(t.path, t)
        if iteration is not None and path_for is not None and iteration and iteration % self.interval == 0:
            return self.request(path_for(iteration))
        return None

    def _capture(self, path: str, ticket: Optional[CheckpointTicket] = None) -> CheckpointTicket:
        rt = self.runtime
        with rt._lock:
            self.epoch += 1
            ticket = ticket or CheckpointTicket(self.epoch, path)
            ticket.epoch, ticket.path = self.epoch, path
            meta_objs = rt.metadata_snapshot()
            dirty = set(rt.modified)
            local, remote = [], []
            for m in meta_objs:
                oid = m["object_id"]
                home = m["home"] or 0
                if oid in dirty or oid not in self.locations:
                    blob = Blob(oid, home, m["size"], data=rt.object_bytes(oid))
                    ticket.fresh.append(oid)
                else:
                    ref, off, length = self.locations[oid]
                    blob = Blob(oid, home, length, ref_path=ref, ref_offset=off)
                    ticket.referenced.append(oid)
                (local if m["location"] == "LOCAL" else remote).append(blob)
            rt.modified.clear()
            ck = CheckpointFile(self.epoch, time.time(),
                                {"epoch": self.epoch, "iteration": rt.iteration, "objects": meta_objs,
                                 "next_id": rt._next_id},
                                local, remote)
        self._inflight = ticket
        self.history.append(ticket)
        threading.Thread(target=self._write, args=(ck, ticket, dirty), daemon=True,
                         name=f"dolma-checkpoint-{self.epoch}").start()
        return ticket

    def _write(self, ck: CheckpointFile, ticket: CheckpointTicket, dirty: set) -> None:
        path = ticket.path
        try:
            image = encode(ck, path)
            tmp = f"{path}.tmp"
            with open(tmp, "wb") as f:
                f.write(image)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, path)
        except Exception as exc:
            with self.runtime._lock:
                # nothing landed: the next checkpoint must copy these objects again
                self.runtime.modified |= {oid for oid in dirty if oid in self.runtime._descs}
            ticket._future.set_exception(CheckpointError(f"writing checkpoint {path} failed: {exc}"))
            return
        with self._lock:
            self.locations.update(ck.locations)
            live = {m["object_id"] for m in ck.metadata["objects"]}
            self.locations = {k: v for k, v in self.locations.items() if k in live}
        ticket._future.set_result(ticket)

    def wait(self) -> None:
        if self._inflight is not None:
            try:
                self._inflight.wait()
            except CheckpointError:
                pass


def checkpoint_async(runtime: Runtime, path) -> CheckpointTicket:
    """Snapshot the runtime at the current barrier; the file is written in the background."""
    return Checkpointer.for_runtime(runtime).request(path)


def recover(path, runtime: Runtime) -> Runtime:
    """Reload a checkpoint into a fresh runtime, keeping object ids and authority."""
    ck = read_checkpoint(path)
    if runtime.objects():
        raise CheckpointError("recovery needs a fresh runtime")
    resolver = _Resolver()
    blobs = {b.object_id: b for b in ck.blobs}
    for m in sorted(ck.metadata["objects"], key=lambda m: m["object_id"]):
        blob = blobs.get(m["object_id"])
        if blob is None:
            raise CheckpointError(f"{path}: object {m['object_id']} has no blob")
        runtime.restore_object(m, resolver.data(blob))
    runtime.quiesce()
    runtime._next_id = max(runtime._next_id, ck.metadata.get("next_id", 0))
    runtime.iteration = ck.metadata.get("iteration", 0)
    runtime.modified.clear()
    state = Checkpointer.for_runtime(runtime)
    state.epoch = ck.epoch
    state.locations = dict(ck.locations)
    return runtime


def materialize(path, out) -> CheckpointFile:
    """Rewrite a checkpoint with every blob inlined, so it no longer depends on predecessors."""
    ck = read_checkpoint(path)
    resolver = _Resolver()
    for b in ck.blobs:
        if b.data is None:
            b.data = resolver.data(b)
            b.ref_path = None
    ck.locations = {}
    image = encode(ck, str(out))
    Path(out).write_bytes(image)
    ck.path = str(out)
    return ck
