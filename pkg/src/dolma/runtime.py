"""Compute-node memory manager.

Local memory is split into a local object region, a software-managed cache
for remote objects (two equal buffers), and a metadata region. Remote reads
return a :class:`FetchTicket` immediately; the wait happens at
:meth:`Runtime.acquire`, right before the data is used. Dirty data is written
back asynchronously through a bounded staging allowance carved out of the
metadata region.
"""
from __future__ import annotations

import enum
import os
import threading
import time
from collections import Counter, OrderedDict, defaultdict
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

from . import placement
from ._ranges import RangeAllocator
from .errors import (CapacityError, ConfigError, LockError, LockTimeout, OutOfRange, RemoteError,
                     TicketError)
from .fabric.base import Fabric
from .fabric.clock import VirtualClock
from .fabric.types import FabricOp, Pattern, RemoteAddr
from .placement import Location, ObjectDescriptor, SizeClass

MiB = 1 << 20
ENTRY_BYTES = 64          # metadata cost of one table entry
LOCK_WORD = 8             # remote lock word stored in front of every home
DEFAULT_STAGING = 64 * MiB
POISON = 0xDB
DEBUG_ENV = "DOLMA_DEBUG"
PREFETCH_CHANNEL_BASE = 1000
CHECKPOINT_CHANNEL = -3

EXCLUSIVE_BIT = 1 << 63
_MASK64 = (1 << 64) - 1


class BufferId(enum.IntEnum):
    A = 0
    B = 1


class LockMode(enum.Enum):
    SHARED = "SHARED"
    EXCLUSIVE = "EXCLUSIVE"


@dataclass
class RegionLayout:
    local_object_bytes: int
    remote_cache_bytes: int
    metadata_bytes: int

    @property
    def budget(self) -> int:
        return self.local_object_bytes + self.remote_cache_bytes + self.metadata_bytes

    @property
    def buffer_half(self) -> int:
        return self.remote_cache_bytes // 2

    def validate(self) -> None:
        for name in ("local_object_bytes", "remote_cache_bytes", "metadata_bytes"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.remote_cache_bytes % 2:
            raise ConfigError("remote_cache_bytes must be even (two equal buffers)")

    @classmethod
    def split(cls, budget: int, local: float, cache: float) -> "RegionLayout":
        """Split ``budget`` by fractions; metadata gets the remainder."""
        local_b = int(budget * local)
        cache_b = int(budget * cache) // 2 * 2
        return cls(local_b, cache_b, budget - local_b - cache_b)


class ObjectHandle(NamedTuple):
    """Tagged address: object id plus byte offset; ``remote`` marks a redirect handle."""

    object_id: int
    offset: int = 0
    remote: bool = False

    def __add__(self, delta: int) -> "ObjectHandle":
        return self._replace(offset=self.offset + delta)


@dataclass(eq=False)
class CacheRange:
    """A contiguous cached slice of one object inside one cache buffer."""

    object_id: int
    buffer: int
    partition: int
    cache_offset: int
    object_offset: int
    length: int
    dirty: bool = False
    staged_for: Optional[int] = None    # prefetched, visible from this iteration on
    pending: list = field(default_factory=list)   # (channel, op_id) reads in flight
    ready_at: float = 0.0
    failed: Optional[str] = None
    pins: int = 0
    iteration: int = 0
    touch: int = 0

    @property
    def end(self) -> int:
        return self.object_offset + self.length

    @property
    def visible(self) -> bool:
        return self.staged_for is None

    def covers(self, offset: int) -> bool:
        return self.object_offset <= offset < self.end


@dataclass(eq=False)
class MetadataEntry:
    object_id: int
    size: int
    home: Optional[RemoteAddr] = None
    ranges: list = field(default_factory=list)
    pending_writes: dict = field(default_factory=dict)  # (channel, op_id) -> (start, end)
    last_touch_iteration: int = 0

    @property
    def dirty(self) -> bool:
        return any(r.dirty for r in self.ranges)

    @property
    def cached(self) -> Optional[CacheRange]:
        return next((r for r in self.ranges if r.visible), None)

    @property
    def payload(self) -> RemoteAddr:
        return self.home + LOCK_WORD


@dataclass(eq=False)
class FetchTicket:
    object_id: int
    op_ids: list
    issued_at: float
    satisfied_range: tuple[int, int]
    thread: int = 0
    acquired: bool = False
    _range: Optional[CacheRange] = None
    _dest: Optional[memoryview] = None
    _data: Optional[memoryview] = None

    @property
    def ready(self) -> bool:
        return self._range is None or not self._range.pending


class _Partition:
    def __init__(self, index: int, start: int, size: int, buffers: int, channel: int, prefetch_channel: int):
        self.index = index
        self.start = start
        self.size = size
        self.allocs = [RangeAllocator(size) for _ in range(buffers)]
        self.active = 0
        self.channel = channel
        self.prefetch_channel = prefetch_channel

    @property
    def idle(self) -> int:
        return 1 - self.active if len(self.allocs) == 2 else self.active

    @property
    def used(self) -> int:
        return sum(a.used for a in self.allocs)


def _debug_default() -> bool:
    return os.environ.get(DEBUG_ENV, "").lower() not in ("", "0", "false", "no")


class Runtime:
    def __init__(self, layout: RegionLayout, fabric: Fabric, *, dual_buffer: bool = True,
                 page_size: int = placement.PAGE_SIZE, staging_bytes: int = DEFAULT_STAGING,
                 debug: Optional[bool] = None, pattern: Pattern = Pattern.SEQ,
                 lock_attempts: int = 10_000, profile: Optional[dict] = None):
        layout.validate()
        self.layout = layout
        self.fabric = fabric
        self.dual_buffer = dual_buffer
        self.page_size = page_size
        self.staging_limit = staging_bytes
        self.debug = _debug_default() if debug is None else debug
        self.pattern = pattern
        self.lock_attempts = lock_attempts
        self.profile = dict(profile or {})
        self.max_transfer = fabric.max_transfer_bytes

        if dual_buffer:
            self._buffers = [bytearray(layout.buffer_half), bytearray(layout.buffer_half)]
        else:
            self._buffers = [bytearray(layout.remote_cache_bytes)]
        self._views = [memoryview(b) for b in self._buffers]

        self._lock = threading.RLock()
        self._next_id = 0
        self._descs: dict[int, ObjectDescriptor] = {}
        self._local: dict[int, bytearray] = {}
        self._local_dirty: dict[int, tuple[int, int]] = {}   # written extent of local objects
        self._table: dict[int, MetadataEntry] = {}
        self._local_used = 0
        self._staging_used = 0
        self._writes: OrderedDict = OrderedDict()   # (channel, op_id) -> (bytes, entry)
        self._done: dict = {}                        # completions consumed early
        self._held_locks: dict = {}
        self._touch = 0
        self.iteration = 0
        self.modified: set[int] = set()
        self.stats: Counter = Counter()
        self.stall_us: defaultdict = defaultdict(float)
        self.write_stall_us: defaultdict = defaultdict(float)
        self.peak_local = 0
        self.peak_breakdown: dict = {}
        self.observers: list = []    # callables (object_id, offset, length, thread) fired on read()
        self._clocks = {0: fabric.clock}
        self.set_partitions(1)

    # -- layout and threads ----------------------------------------------

    @property
    def buffer_size(self) -> int:
        return len(self._buffers[0])

    def set_partitions(self, threads: int, channels=None, prefetch_channels=None) -> None:
        """Split every cache buffer into ``threads`` disjoint partitions.

        Each partition is ``floor(buffer / threads)`` bytes and the last one
        also takes the remainder.
        """
        if threads < 1:
            raise ConfigError("threads must be >= 1")
        with self._lock:
            if any(e.ranges for e in self._table.values()):
                raise ConfigError("cannot repartition while objects are cached")
            channels = list(channels) if channels is not None else [0] * threads
            prefetch_channels = (list(prefetch_channels) if prefetch_channels is not None
                                 else [PREFETCH_CHANNEL_BASE + c for c in channels])
            size = self.buffer_size // threads
            self._parts = []
            for t in range(threads):
                n = size if t < threads - 1 else self.buffer_size - size * (threads - 1)
                self._parts.append(_Partition(t, t * size, n, len(self._buffers), channels[t], prefetch_channels[t]))
            base = self.fabric.clock
            for t in range(1, threads):
                if t not in self._clocks:
                    self._clocks[t] = base.fork()

    def partition(self, thread: int = 0) -> _Partition:
        return self._parts[thread]

    def clock_for(self, thread: int = 0):
        return self._clocks[thread]

    def channel_for(self, thread: int = 0) -> int:
        return self._parts[thread].channel

    # -- accounting ---------------------------------------------------------

    @property
    def cache_used(self) -> int:
        return sum(p.used for p in self._parts)

    @property
    def metadata_used(self) -> int:
        return len(self._table) * ENTRY_BYTES + self._staging_used

    def local_usage(self) -> int:
        return self._local_used + self.cache_used + self.metadata_used

    def _account(self) -> None:
        used = self.local_usage()
        if self._local_used > self.layout.local_object_bytes or self.metadata_used > self.layout.metadata_bytes \
                or used > self.layout.budget:
            raise CapacityError(f"local usage {used} exceeds budget {self.layout.budget}")
        if used > self.peak_local:
            self.peak_local = used
            self.peak_breakdown = {"local": self._local_used, "cache": self.cache_used,
                                   "metadata": self.metadata_used}

    def _new_entry_fits(self) -> bool:
        return self.metadata_used + ENTRY_BYTES <= self.layout.metadata_bytes

    # -- lookup -------------------------------------------------------------

    def descriptor(self, handle) -> ObjectDescriptor:
        oid = handle.object_id if isinstance(handle, ObjectHandle) else handle
        try:
            return self._descs[oid]
        except KeyError:
            raise OutOfRange(f"unknown object {oid}") from None

    def entry(self, handle) -> Optional[MetadataEntry]:
        oid = handle.object_id if isinstance(handle, ObjectHandle) else handle
        return self._table.get(oid)

    def objects(self) -> list[ObjectDescriptor]:
        return list(self._descs.values())

    def location(self, handle) -> Location:
        return self.descriptor(handle).location

    def is_local(self, handle) -> bool:
        oid = handle.object_id if isinstance(handle, ObjectHandle) else handle
        return oid in self._local

    # -- allocation -----------------------------------------------------------

    def alloc(self, size: int, tag: Optional[str] = None, thread: int = 0) -> ObjectHandle:
        """Allocate an object, locally when it fits (after demoting victims if needed)."""
        if size < 1:
            raise ValueError("size must be >= 1")
        with self._lock:
            self._next_id += 1
            desc = ObjectDescriptor(self._next_id, size, alloc_iteration=self.iteration, tag=tag)
            if tag is not None and tag in self.profile:
                desc.read_count, desc.write_count = self.profile[tag]
            cap = self.layout.local_object_bytes
            free = cap - self._local_used
            local = size <= free
            if not local and size <= cap:
                resident = [self._descs[o] for o in self._local
                            if placement.classify(self._descs[o], self.page_size) is SizeClass.LARGE]
                sel = placement.select_victims(resident, size - free)
                if not sel.insufficient:
                    for victim in sel.victims:
                        self._demote_local(victim.object_id, thread)
                    local = True
            if local:
                self._local[desc.object_id] = bytearray(size)
                self._local_used += size
                self._descs[desc.object_id] = desc
                self.modified.add(desc.object_id)
                self._account()
                return ObjectHandle(desc.object_id, 0, False)
            if not self._new_entry_fits():
                raise CapacityError("metadata region full")
            home = self.fabric.remote_alloc(size + LOCK_WORD)
            desc.location = Location.REMOTE
            self._descs[desc.object_id] = desc
            self._table[desc.object_id] = MetadataEntry(desc.object_id, size, home,
                                                        last_touch_iteration=self.iteration)
            self.modified.add(desc.object_id)
            self.stats["remote_allocs"] += 1
            self._account()
            return ObjectHandle(desc.object_id, 0, True)

    def free(self, handle, thread: int = 0) -> None:
        oid = handle.object_id if isinstance(handle, ObjectHandle) else handle
        with self._lock:
            desc = self.descriptor(oid)
            desc.free_iteration = self.iteration
            if oid in self._local:
                self._local_used -= len(self._local.pop(oid))
                self._local_dirty.pop(oid, None)
            else:
                entry = self._table[oid]
                for r in list(entry.ranges):
                    if r.pins:
                        raise TicketError(f"object {oid} has outstanding tickets")
                    self._drop_range(r, thread, writeback=False)
                for key in list(entry.pending_writes):
                    self._finish_write(key)
                self.fabric.remote_free(entry.home)
                del self._table[oid]
                self._held_locks = {k: v for k, v in self._held_locks.items() if k[0] != oid}
            del self._descs[oid]
            self.modified.discard(oid)
            self._account()

    def apply_profile(self, profile: dict) -> None:
        """Seed access counters from ``{tag: (reads, writes)}``."""
        with self._lock:
            self.profile.update(profile)
            for desc in self._descs.values():
                if desc.tag in profile:
                    desc.read_count, desc.write_count = profile[desc.tag]

    # -- fabric plumbing --------------------------------------------------------

    def _wait_op(self, channel: int, op_id: int):
        c = self._done.pop((channel, op_id), None)
        return c if c is not None else self.fabric.wait(channel, op_id)

    def _finish_write(self, key, clock=None) -> float:
        """Retire one staged write; with ``clock`` the caller waits for it."""
        nbytes, entry = self._writes.pop(key)
        c = self._wait_op(*key)
        self._staging_used -= nbytes
        entry.pending_writes.pop(key, None)
        if not c.ok:
            raise RemoteError(f"write-back of object {entry.object_id} failed: {c.error}",
                              object_id=entry.object_id)
        return clock.advance_to(c.completed_at) if clock is not None else 0.0

    def _reap(self, now: float) -> None:
        for key in list(self._writes):
            done = self._done.get(key)
            t = done.completed_at if done is not None else self.fabric.completion_time(*key)
            if t is not None and t <= now:
                self._finish_write(key)

    def _order_after_writes(self, entry: MetadataEntry, channel: int, thread: int,
                            lo: int = 0, hi: Optional[int] = None) -> float:
        """Earliest time an access to ``[lo, hi)`` on ``channel`` may start so it observes pending writes."""
        clock = self.clock_for(thread)
        start = clock.now()
        hi = entry.size if hi is None else hi
        same = False
        for key, (w_lo, w_hi) in list(entry.pending_writes.items()):
            if w_hi <= lo or hi <= w_lo:
                continue
            if key[0] == channel:
                same = True
                continue
            t = self.fabric.completion_time(*key)
            if t is None:
                c = self.fabric.wait(*key)
                self._done[key] = c
                t = c.completed_at
            start = max(start, t)
        if same:
            self.fabric.fence(channel)
            self.stats["fences"] += 1
        return start

    def _reserve_staging(self, nbytes: int, thread: int) -> bool:
        clock = self.clock_for(thread)
        self._reap(clock.now())
        cap = min(self.staging_limit, self.layout.metadata_bytes - len(self._table) * ENTRY_BYTES)
        if nbytes > cap:
            return False
        while self._staging_used + nbytes > cap:
            stall = self._finish_write(next(iter(self._writes)), clock)
            self.write_stall_us[thread] += stall
            self.stall_us[thread] += stall
        self._staging_used += nbytes
        return True

    def _issue_writes(self, entry: MetadataEntry, obj_off: int, data: memoryview, thread: int) -> None:
        n = len(data)
        part = self._parts[thread]
        clock = self.clock_for(thread)
        staged = self._reserve_staging(n, thread)
        issue_at = self._order_after_writes(entry, part.channel, thread, obj_off, obj_off + n)
        keys = []
        for pos in range(0, n, self.max_transfer):
            chunk = data[pos:pos + self.max_transfer]
            op = FabricOp.write(entry.payload + obj_off + pos, chunk, self.pattern)
            op_id = self.fabric.submit(part.channel, op, issue_at=issue_at)
            keys.append(((part.channel, op_id), len(chunk), obj_off + pos))
            self.stats["write_ops"] += 1
        self.stats["write_bytes"] += n
        if staged:
            for key, nbytes, lo in keys:
                self._writes[key] = (nbytes, entry)
                entry.pending_writes[key] = (lo, lo + nbytes)
            if self._staging_used:
                self._account()
        else:
            # no staging room: the source is reusable only once the write has landed
            for key, _, _ in keys:
                c = self._wait_op(*key)
                if not c.ok:
                    raise RemoteError(f"write of object {entry.object_id} failed: {c.error}",
                                      object_id=entry.object_id)
                stall = clock.advance_to(c.completed_at)
                self.write_stall_us[thread] += stall
                self.stall_us[thread] += stall

    def _issue_reads(self, entry: MetadataEntry, obj_off: int, dest: memoryview, channel: int,
                     issue_at: float) -> list:
        keys = []
        for pos in range(0, len(dest), self.max_transfer):
            chunk = dest[pos:pos + self.max_transfer]
            op = FabricOp.read(entry.payload + obj_off + pos, chunk, self.pattern)
            keys.append((channel, self.fabric.submit(channel, op, issue_at=issue_at)))
            self.stats["fetch_ops"] += 1
        self.stats["fetch_bytes"] += len(dest)
        return keys

    def _drain(self, r: CacheRange) -> None:
        """Wait for a range's reads to land without charging the caller's clock."""
        for key in r.pending:
            c = self._wait_op(*key)
            r.ready_at = max(r.ready_at, c.completed_at)
            if not c.ok:
                r.failed = c.error
        r.pending = []

    # -- cache ranges -------------------------------------------------------------

    def _cache_view(self, r: CacheRange) -> memoryview:
        start = self._parts[r.partition].start + r.cache_offset
        return self._views[r.buffer][start:start + r.length]

    def _next_touch(self) -> int:
        self._touch += 1
        return self._touch

    def _visible_at(self, entry: MetadataEntry, offset: int) -> Optional[CacheRange]:
        for r in entry.ranges:
            if r.visible and r.covers(offset):
                return r
        return None

    def _visible_limit(self, entry: MetadataEntry, offset: int, end: int) -> int:
        """End of the uncached run starting at ``offset`` (stops at the next visible range)."""
        for r in entry.ranges:
            if r.visible and offset < r.object_offset < end:
                end = r.object_offset
        return end

    def _writeback(self, r: CacheRange, thread: int) -> None:
        if r.dirty:
            self._issue_writes(self._table[r.object_id], r.object_offset, self._cache_view(r), thread)
            r.dirty = False
            self.stats["writebacks"] += 1

    def _drop_range(self, r: CacheRange, thread: int, writeback: bool = True) -> None:
        entry = self._table[r.object_id]
        if r.pending:
            self._drain(r)
        if writeback and not r.failed:
            self._writeback(r, thread)
        self._parts[r.partition].allocs[r.buffer].free(r.cache_offset)
        entry.ranges.remove(r)
        if not entry.ranges:
            self._descs[r.object_id].location = Location.REMOTE

    def _make_room(self, part: _Partition, buffer: int, want: int, thread: int, exact: bool = False) -> int:
        alloc = part.allocs[buffer]
        target = min(want, alloc.capacity - alloc.capacity % alloc.align)
        if target <= 0:
            return 0
        if alloc.fits(target):
            return target
        victims = [r for e in self._table.values() for r in e.ranges
                   if r.partition == part.index and r.buffer == buffer and r.visible and not r.pins]
        victims.sort(key=lambda r: (r.dirty, r.iteration, r.touch))
        for r in victims:
            self._drop_range(r, thread)
            self.stats["evictions"] += 1
            if alloc.fits(target):
                return target
        if exact:
            return 0
        n = alloc.largest_free()
        if n == 0:
            raise CapacityError("cache partition is exhausted by outstanding tickets")
        return n

    def _fetch(self, entry: MetadataEntry, offset: int, length: int, part: _Partition, buffer: int,
               thread: int, channel: int, staged_for: Optional[int] = None) -> CacheRange:
        cache_off = part.allocs[buffer].alloc(length)
        r = CacheRange(entry.object_id, buffer, part.index, cache_off, offset, length,
                       staged_for=staged_for, iteration=self.iteration, touch=self._next_touch())
        issue_at = self._order_after_writes(entry, channel, thread, offset, offset + length)
        r.pending = self._issue_reads(entry, offset, self._cache_view(r), channel, issue_at)
        entry.ranges.append(r)
        self._descs[entry.object_id].location = Location.REMOTE_CACHED
        return r

    def _patch_staged(self, entry: MetadataEntry, offset: int, data: memoryview) -> None:
        """Apply a write to prefetched copies that are not yet visible."""
        end = offset + len(data)
        for r in list(entry.ranges):
            if r.visible or r.end <= offset or r.object_offset >= end:
                continue
            if r.pending:
                self._drain(r)
            if r.failed:
                self._drop_range(r, 0, writeback=False)
                continue
            lo, hi = max(offset, r.object_offset), min(end, r.end)
            self._cache_view(r)[lo - r.object_offset:hi - r.object_offset] = data[lo - offset:hi - offset]
            r.dirty = True

    # -- reads ------------------------------------------------------------------

    def _check_range(self, desc: ObjectDescriptor, offset: int, length: int) -> None:
        if offset < 0 or length < 1 or offset + length > desc.size:
            raise OutOfRange(f"[{offset}, {offset + length}) outside object {desc.object_id} of {desc.size} bytes")

    def read(self, handle: ObjectHandle, offset: int, length: int, dest=None, thread: int = 0) -> FetchTicket:
        """Start reading ``length`` bytes; the ticket's ``satisfied_range`` may be a prefix.

        Cached and local data is served without fabric traffic. A miss issues
        READs into the active cache buffer, fetching the largest prefix of the
        request that fits, and returns before they complete.
        """
        oid = handle.object_id
        offset += handle.offset
        dest = memoryview(dest).cast("B") if dest is not None else None
        with self._lock:
            desc = self.descriptor(oid)
            self._check_range(desc, offset, length)
            desc.count_read()
            for cb in self.observers:
                cb(oid, offset, length, thread)
            clock = self.clock_for(thread)
            now = clock.now()
            if oid in self._local:
                view = memoryview(self._local[oid])[offset:offset + length]
                return self._satisfied(oid, offset, view, dest, now, thread)
            entry = self._table[oid]
            entry.last_touch_iteration = self.iteration
            if entry.size <= 8:
                word = self._atomic_load(entry, thread).to_bytes(8, "little")
                view = memoryview(word)[offset:offset + length]
                self.stats["remote_accesses"] += 1
                return self._satisfied(oid, offset, view, dest, now, thread)

            r = self._visible_at(entry, offset)
            if r is not None:
                self.stats["cache_hits"] += 1
            else:
                part = self._parts[thread]
                want = self._visible_limit(entry, offset, offset + length) - offset
                n = self._make_room(part, part.active, want, thread)
                r = self._fetch(entry, offset, n, part, part.active, thread, part.channel)
                self.stats["remote_accesses"] += 1
                self.stats["demand_fetches"] += 1
            r.iteration = self.iteration
            r.touch = self._next_touch()
            n = min(offset + length, r.end) - offset
            ticket = FetchTicket(oid, list(r.pending), now, (offset, n), thread, _range=r, _dest=dest)
            if r.pending or r.failed:
                r.pins += 1
                if dest is not None and self.debug:
                    dest[:n] = bytes([POISON]) * n
            else:
                ticket._data = self._copy_out(r, offset, n, dest)
            return ticket

    def _satisfied(self, oid, offset, view, dest, now, thread) -> FetchTicket:
        n = len(view)
        if dest is not None:
            dest[:n] = view
            view = dest[:n]
        return FetchTicket(oid, [], now, (offset, n), thread, _data=view)

    def _copy_out(self, r: CacheRange, offset: int, n: int, dest) -> memoryview:
        lo = offset - r.object_offset
        view = self._cache_view(r)[lo:lo + n]
        if dest is None:
            return view
        dest[:n] = view
        return dest[:n]

    def acquire(self, ticket: FetchTicket) -> memoryview:
        """Wait for a ticket's fetch to land and return the satisfied bytes.

        The returned view of cache memory stays valid until the next runtime
        call on the same thread that can evict.
        """
        if ticket.acquired:
            raise TicketError(f"ticket for object {ticket.object_id} already acquired")
        ticket.acquired = True
        r = ticket._range
        if ticket._data is not None and (r is None or not r.pins or not (r.pending or r.failed)):
            return ticket._data
        with self._lock:
            clock = self.clock_for(ticket.thread)
            t0 = clock.now()
            if r.pending:
                self._drain(r)
            r.pins -= 1
            stall = clock.now() - t0 + clock.advance_to(r.ready_at)
            self.stall_us[ticket.thread] += stall
            self.stats["acquire_stall_us"] += stall
            if r.failed:
                err = r.failed
                if not r.pins and r in self._table[r.object_id].ranges:
                    self._drop_range(r, ticket.thread, writeback=False)
                raise RemoteError(f"fetch of object {ticket.object_id} failed: {err}",
                                  object_id=ticket.object_id)
            offset, n = ticket.satisfied_range
            ticket._data = self._copy_out(r, offset, n, ticket._dest)
            return ticket._data

    def load(self, handle: ObjectHandle, offset: int = 0, length: Optional[int] = None, thread: int = 0) -> bytes:
        """Read a whole range, looping over partial fetches."""
        desc = self.descriptor(handle)
        offset += handle.offset
        if length is None:
            length = desc.size - offset
        out = bytearray(length)
        pos = 0
        base = ObjectHandle(handle.object_id, 0, handle.remote)
        while pos < length:
            t = self.read(base, offset + pos, length - pos, memoryview(out)[pos:], thread)
            pos += len(self.acquire(t))
        return bytes(out)

    # -- writes -----------------------------------------------------------------

    def write(self, handle: ObjectHandle, offset: int, data, thread: int = 0) -> None:
        oid = handle.object_id
        offset += handle.offset
        data = memoryview(data).cast("B")
        n = len(data)
        with self._lock:
            desc = self.descriptor(oid)
            self._check_range(desc, offset, n)
            desc.count_write()
            self.modified.add(oid)
            if oid in self._local:
                self._local[oid][offset:offset + n] = data
                lo, hi = self._local_dirty.get(oid, (offset, offset + n))
                self._local_dirty[oid] = (min(lo, offset), max(hi, offset + n))
                return
            entry = self._table[oid]
            entry.last_touch_iteration = self.iteration
            if entry.size <= 8:
                self._atomic_store(entry, offset, data, thread)
                return
            self._patch_staged(entry, offset, data)
            r = self._visible_at(entry, offset)
            if r is not None and r.end >= offset + n and not r.failed:
                if r.pending:
                    self._drain(r)
                    self.stall_us[thread] += self.clock_for(thread).advance_to(r.ready_at)
                lo = offset - r.object_offset
                self._cache_view(r)[lo:lo + n] = data
                r.dirty = True
                r.iteration, r.touch = self.iteration, self._next_touch()
                return
            for r in [r for r in entry.ranges if r.visible and r.object_offset < offset + n and offset < r.end]:
                if r.pins:
                    raise TicketError(f"object {oid} has outstanding tickets over the written range")
                self._drop_range(r, thread)
            part = self._parts[thread]
            if n <= part.size and self._make_room(part, part.active, n, thread, exact=True):
                cache_off = part.allocs[part.active].alloc(n)
                r = CacheRange(oid, part.active, part.index, cache_off, offset, n, dirty=True,
                               iteration=self.iteration, touch=self._next_touch())
                self._cache_view(r)[:] = data
                entry.ranges.append(r)
                desc.location = Location.REMOTE_CACHED
                self._account()
            else:
                self._issue_writes(entry, offset, data, thread)
                self.stats["write_through"] += 1

    # -- demotion -----------------------------------------------------------------

    def _demote_local(self, oid: int, thread: int) -> None:
        data = self._local[oid]
        if not self._new_entry_fits():
            raise CapacityError("metadata region full")
        home = self.fabric.remote_alloc(len(data) + LOCK_WORD)
        entry = MetadataEntry(oid, len(data), home, last_touch_iteration=self.iteration)
        self._table[oid] = entry
        # a fresh home reads as zeros, so only the written extent has to travel
        lo, hi = self._local_dirty.get(oid, (0, 0))
        try:
            if hi > lo:
                self._issue_writes(entry, lo, memoryview(data)[lo:hi], thread)
        except Exception:
            del self._table[oid]
            self.fabric.remote_free(home)
            raise
        self._local_dirty.pop(oid, None)
        del self._local[oid]
        self._local_used -= len(data)
        self._descs[oid].location = Location.REMOTE
        self.stats["demotions"] += 1
        self._account()

    def demote(self, handle, thread: int = 0) -> None:
        """Write an object's dirty bytes home asynchronously and release its local space."""
        oid = handle.object_id if isinstance(handle, ObjectHandle) else handle
        with self._lock:
            self.descriptor(oid)
            if oid in self._local:
                self._demote_local(oid, thread)
                return
            entry = self._table[oid]
            for r in list(entry.ranges):
                if r.pins:
                    raise TicketError(f"object {oid} has outstanding tickets")
                self._drop_range(r, thread)
            self.stats["demotions"] += 1
            self._account()

    def write_behind(self, handle: ObjectHandle, offset: int, length: int, thread: int = 0) -> int:
        """Start writing home the dirty cached bytes of ``[offset, offset+length)`` without waiting.

        Ranges stay cached, now clean, so a later eviction or buffer swap drops
        them without a write burst. Ranges already copied into a staged range
        are skipped, since the staged copy carries their dirty bytes. Without
        a staging pool this is a no-op. Returns the bytes issued.
        """
        if self.staging_limit <= 0:
            return 0
        offset += handle.offset
        with self._lock:
            entry = self._table.get(handle.object_id)
            if entry is None:
                return 0
            staged = [s for s in entry.ranges if not s.visible and s.partition == thread]
            issued = 0
            for r in entry.ranges:
                if not (r.visible and r.dirty and r.partition == thread and not r.pins):
                    continue
                if r.end <= offset or offset + length <= r.object_offset:
                    continue
                if any(s.object_offset <= r.object_offset and r.end <= s.end for s in staged):
                    continue
                self._writeback(r, thread)
                issued += r.length
            self.stats["write_behind_bytes"] += issued
            return issued

    def flush(self, thread: int = 0) -> None:
        """Write back every dirty range and wait until all writes have landed."""
        with self._lock:
            for entry in list(self._table.values()):
                for r in list(entry.ranges):
                    if r.pending:
                        self._drain(r)
                    self._writeback(r, thread)
            self.quiesce(thread)

    def quiesce(self, thread: int = 0) -> None:
        with self._lock:
            clock = self.clock_for(thread)
            while self._writes:
                self.stall_us[thread] += self._finish_write(next(iter(self._writes)), clock)
            self._account()

    # -- indirect access ------------------------------------------------------------

    def resolve_indirect(self, handle_a: ObjectHandle, handle_b: ObjectHandle, index: int,
                         element_size: int, thread: int = 0) -> FetchTicket:
        """Start the read of ``A[B[index]]``; ``B[index]`` is fetched and acquired first."""
        raw = bytes(self.acquire(self.read(handle_b, index * element_size, element_size, thread=thread)))
        target = int.from_bytes(raw, "little")
        size_a = self.descriptor(handle_a).size - handle_a.offset
        if (target + 1) * element_size > size_a:
            raise OutOfRange(f"index {target} decoded from object {handle_b.object_id} is outside object "
                             f"{handle_a.object_id}")
        return self.read(handle_a, target * element_size, element_size, thread=thread)

    # -- atomics and remote locks -------------------------------------------------

    def _atomic_load(self, entry: MetadataEntry, thread: int) -> int:
        ch = self.channel_for(thread)
        self._order_after_writes(entry, ch, thread)
        return self.fabric.atomic_fadd(entry.payload, 0, channel=ch)

    def _atomic_store(self, entry: MetadataEntry, offset: int, data: memoryview, thread: int) -> None:
        ch = self.channel_for(thread)
        self._order_after_writes(entry, ch, thread)
        old = self.fabric.atomic_fadd(entry.payload, 0, channel=ch)
        while True:
            word = bytearray(old.to_bytes(8, "little"))
            word[offset:offset + len(data)] = data
            new = int.from_bytes(word, "little")
            prev = self.fabric.atomic_cas(entry.payload, old, new, channel=ch)
            if prev == old:
                self.stats["remote_accesses"] += 1
                return
            old = prev

    def _backoff(self, attempt: int, thread: int) -> None:
        delay_us = min(1000.0, 2.0 ** min(attempt, 10))
        clock = self.clock_for(thread)
        if isinstance(clock, VirtualClock):
            clock.advance(delay_us)
        time.sleep(delay_us * 1e-6 if attempt > 3 else 0)

    def lock_remote(self, handle: ObjectHandle, mode: LockMode = LockMode.EXCLUSIVE, thread: int = 0,
                    max_attempts: Optional[int] = None) -> int:
        """Take the object's remote lock word with CAS; returns the number of CAS issued."""
        oid = handle.object_id
        entry = self._table.get(oid)
        if entry is None:
            raise LockError(f"object {oid} has no remote home")
        if (oid, thread) in self._held_locks:
            raise LockError(f"thread {thread} already holds the lock of object {oid}")
        attempts = max_attempts or self.lock_attempts
        ch = self.channel_for(thread)
        expected = 0
        for attempt in range(attempts):
            if mode is LockMode.EXCLUSIVE:
                prev = self.fabric.atomic_cas(entry.home, 0, EXCLUSIVE_BIT, channel=ch)
                if prev == 0:
                    self._held_locks[(oid, thread)] = mode
                    return attempt + 1
            else:
                prev = self.fabric.atomic_cas(entry.home, expected, expected + 1, channel=ch)
                if prev == expected:
                    self._held_locks[(oid, thread)] = mode
                    return attempt + 1
                if not prev & EXCLUSIVE_BIT:
                    expected = prev
                    continue
                expected = 0
            self._backoff(attempt, thread)
        raise LockTimeout(f"lock on object {oid} not acquired after {attempts} attempts")

    def unlock_remote(self, handle: ObjectHandle, thread: int = 0) -> int:
        oid = handle.object_id
        mode = self._held_locks.pop((oid, thread), None)
        if mode is None:
            raise LockError(f"thread {thread} does not hold the lock of object {oid}")
        entry = self._table[oid]
        ch = self.channel_for(thread)
        if mode is LockMode.EXCLUSIVE:
            prev = self.fabric.atomic_cas(entry.home, EXCLUSIVE_BIT, 0, channel=ch)
            if prev != EXCLUSIVE_BIT:
                raise LockError(f"lock word of object {oid} corrupted: {prev:#x}")
            return 1
        expected, casts = 1, 0
        while True:
            casts += 1
            prev = self.fabric.atomic_cas(entry.home, expected, (expected - 1) & _MASK64, channel=ch)
            if prev == expected:
                return casts
            if prev == 0 or prev & EXCLUSIVE_BIT:
                raise LockError(f"lock word of object {oid} corrupted: {prev:#x}")
            expected = prev

    # -- iteration and prefetch support --------------------------------------------

    def stage(self, handle: ObjectHandle, offset: int, length: int, iteration: int, thread: int = 0,
              channel: Optional[int] = None) -> list[CacheRange]:
        """Prefetch as much of ``[offset, offset+length)`` as fits into the idle buffer.

        Bytes already cached are copied across instead of fetched again (dirty
        ones are also newer than the home copy); everything else is read from
        the home. The staged ranges become readable when the buffers swap at
        ``iteration``.
        """
        oid = handle.object_id
        offset += handle.offset
        with self._lock:
            desc = self.descriptor(oid)
            self._check_range(desc, offset, length)
            if oid in self._local:
                return []
            entry = self._table[oid]
            if entry.size <= 8:
                return []
            part = self._parts[thread]
            alloc = part.allocs[part.idle]
            ch = part.prefetch_channel if channel is None else channel
            staged = [r for r in entry.ranges if not r.visible and r.staged_for == iteration]
            cached = [r for r in entry.ranges if r.visible and not r.failed]
            out = []
            pos, end = offset, offset + length
            while pos < end:
                done = next((r for r in staged if r.covers(pos)), None)
                if done is not None:
                    pos = done.end
                    continue
                stop = min([end] + [r.object_offset for r in staged + cached if pos < r.object_offset < end])
                src = next((r for r in cached if r.covers(pos)), None)
                if src is not None:
                    stop = min(stop, src.end)
                n = min(stop - pos, alloc.largest_free())
                if n <= 0:
                    break
                if src is None:
                    r = self._fetch(entry, pos, n, part, part.idle, thread, ch, staged_for=iteration)
                    self.stats["prefetch_bytes"] += n
                else:
                    if src.pending:
                        self._drain(src)
                    r = CacheRange(oid, part.idle, part.index, alloc.alloc(n), pos, n, dirty=src.dirty,
                                   staged_for=iteration, ready_at=max(self.now(thread), src.ready_at),
                                   iteration=self.iteration, touch=self._next_touch())
                    lo = pos - src.object_offset
                    self._cache_view(r)[:] = self._cache_view(src)[lo:lo + n]
                    entry.ranges.append(r)
                    self.stats["prefetch_copied_bytes"] += n
                out.append(r)
                pos += n
            self._account()
            return out

    def staged_ranges(self, thread: int = 0, iteration: Optional[int] = None) -> list[CacheRange]:
        return [r for e in self._table.values() for r in e.ranges
                if r.partition == thread and not r.visible
                and (iteration is None or r.staged_for == iteration)]

    def swap_buffers(self, iteration: int, thread: int = 0) -> None:
        """Flip the partition's active buffer, expose its prefetched ranges and clear the new idle one."""
        with self._lock:
            part = self._parts[thread]
            if len(part.allocs) != 2:
                raise ConfigError("buffer swapping needs the dual-buffer layout")
            part.active = 1 - part.active
            self.iteration = iteration
            for e in list(self._table.values()):
                mine = [r for r in e.ranges if r.partition == part.index]
                promoted = []
                for r in mine:
                    if r.buffer == part.active and not r.visible and r.staged_for <= iteration:
                        if r.pending:
                            self._drain(r)
                        if r.failed:
                            self._drop_range(r, thread, writeback=False)
                        else:
                            promoted.append(r)
                for r in mine:
                    if r.buffer != part.idle or not r.visible:
                        continue
                    if r.pins:
                        raise TicketError(f"object {r.object_id} has outstanding tickets at buffer swap")
                    # staged copies received every write made after staging, so an old copy
                    # they fully cover holds nothing newer
                    covered = any(p.object_offset <= r.object_offset and r.end <= p.end for p in promoted)
                    self._drop_range(r, thread, writeback=not covered)
                for r in promoted:
                    r.staged_for = None
                    r.iteration = iteration
            self._account()

    def charge(self, us: float, thread: int = 0) -> None:
        """Account modelled compute time on the thread's clock."""
        self.clock_for(thread).advance(us)

    def now(self, thread: int = 0) -> float:
        return self.clock_for(thread).now()

    # -- checkpoint support ---------------------------------------------------------

    def object_bytes(self, handle, thread: int = 0) -> bytes:
        """Current authoritative bytes of an object without touching counters or the cache."""
        oid = handle.object_id if isinstance(handle, ObjectHandle) else handle
        with self._lock:
            if oid in self._local:
                return bytes(self._local[oid])
            entry = self._table[oid]
            for key in list(entry.pending_writes):
                if key not in self._done:
                    self._done[key] = self.fabric.wait(*key)
            data = bytearray(self.fabric.read_sync(entry.payload, entry.size, channel=CHECKPOINT_CHANNEL))
            for r in entry.ranges:
                if r.dirty:
                    if r.pending:
                        self._drain(r)
                    data[r.object_offset:r.end] = self._cache_view(r)
            return bytes(data)

    def metadata_snapshot(self) -> list[dict]:
        with self._lock:
            out = []
            for oid, d in sorted(self._descs.items()):
                e = self._table.get(oid)
                out.append({
                    "object_id": oid, "size": d.size, "tag": d.tag,
                    "location": "LOCAL" if oid in self._local else "REMOTE",
                    "home": None if e is None else e.home.offset,
                    "read_count": d.read_count, "write_count": d.write_count,
                    "alloc_iteration": d.alloc_iteration,
                })
            return out

    def restore_object(self, meta: dict, data: bytes, thread: int = 0) -> ObjectHandle:
        """Recreate an object with its original id and authority (used by recovery)."""
        oid, size = meta["object_id"], meta["size"]
        with self._lock:
            if oid in self._descs:
                raise ConfigError(f"object {oid} already exists")
            desc = ObjectDescriptor(oid, size, meta.get("read_count", 0), meta.get("write_count", 0),
                                    meta.get("alloc_iteration", 0), tag=meta.get("tag"))
            self._next_id = max(self._next_id, oid)
            if meta["location"] == "LOCAL":
                if self._local_used + size > self.layout.local_object_bytes:
                    raise CapacityError(f"object {oid} does not fit the local region")
                self._local[oid] = bytearray(data)
                self._local_dirty[oid] = (0, size)
                self._local_used += size
                self._descs[oid] = desc
                self._account()
                return ObjectHandle(oid, 0, False)
            if not self._new_entry_fits():
                raise CapacityError("metadata region full")
            home = self.fabric.remote_alloc(size + LOCK_WORD)
            entry = MetadataEntry(oid, size, home)
            desc.location = Location.REMOTE
            self._descs[oid] = desc
            self._table[oid] = entry
            self._issue_writes(entry, 0, memoryview(data), thread)
            self._account()
            return ObjectHandle(oid, 0, True)

    def handle(self, oid: int) -> ObjectHandle:
        return ObjectHandle(oid, 0, oid not in self._local)


def configure(layout: RegionLayout, fabric: Fabric, **kw) -> Runtime:
    return Runtime(layout, fabric, **kw)
