"""Dual-buffer iterative prefetching.

While iteration ``i`` computes out of the active cache buffer, the reads
planned for iteration ``i + 1`` are issued into the idle buffer. At the next
iteration boundary the prefetcher waits for those reads, swaps the buffers
and starts prefetching the following iteration.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .runtime import BufferId, FetchTicket, ObjectHandle, Runtime

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PlanEntry:
    object_id: int
    offset: int
    length: int


@dataclass
class IterationPlan:
    """Expected reads per iteration.

    With ``repeat`` the listed iterations are reused cyclically, which is the
    common case of an iterative kernel touching the same arrays every step.
    """

    iterations: list[list[PlanEntry]] = field(default_factory=list)
    depth: int = 1
    repeat: bool = False

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("prefetch depth must be >= 1")
        self.iterations = [[e if isinstance(e, PlanEntry) else PlanEntry(*e) for e in it]
                           for it in self.iterations]

    @property
    def empty(self) -> bool:
        return not any(self.iterations)

    def reads_for(self, i: int) -> list[PlanEntry]:
        if not self.iterations or i < 0:
            return []
        if i < len(self.iterations):
            return self.iterations[i]
        return self.iterations[i % len(self.iterations)] if self.repeat else []

    def bytes_for(self, i: int) -> int:
        return sum(e.length for e in self.reads_for(i))

    @classmethod
    def uniform(cls, entries, depth: int = 1) -> "IterationPlan":
        """Same reads every iteration."""
        return cls([list(entries)], depth=depth, repeat=True)

    @classmethod
    def load(cls, path, runtime: Runtime, depth: int = 1, repeat: bool = False) -> "IterationPlan":
        """Read ``[[{object_tag, offset, length}, ...], ...]`` and resolve tags against live objects."""
        by_tag = {d.tag: d.object_id for d in runtime.objects() if d.tag is not None}
        raw = json.loads(Path(path).read_text())
        iterations = []
        for it in raw:
            entries = []
            for e in it:
                if e["object_tag"] not in by_tag:
                    raise ConfigError(f"plan references unknown object tag {e['object_tag']!r}")
                entries.append(PlanEntry(by_tag[e["object_tag"]], int(e["offset"]), int(e["length"])))
            iterations.append(entries)
        return cls(iterations, depth, repeat)


@dataclass
class DualBufferState:
    active: BufferId = BufferId.A
    idle_ready: bool = True
    idle_tickets: list[FetchTicket] = field(default_factory=list)
    stall_accumulator: float = 0.0


@dataclass
class StallReport:
    total_us: float
    per_iteration: dict[int, float]
    truncations: list[dict]


class Prefetcher:
    """Drives the buffer swaps of one cache partition (one worker thread)."""

    def __init__(self, runtime: Runtime, thread: int = 0, channel: Optional[int] = None):
        self.runtime = runtime
        self.thread = thread
        self.channel = channel
        self.plan = IterationPlan()
        self.enabled = False
        self.state = DualBufferState()
        self.truncations: list[dict] = []
        self.per_iteration: dict[int, float] = {}
        self._current: Optional[int] = None
        self._mark = 0.0

    def register_plan(self, plan: IterationPlan) -> None:
        """Arm the prefetcher; an empty plan leaves the runtime purely on-demand."""
        self.plan = plan
        self.enabled = not plan.empty
        if self.enabled and not self.runtime.dual_buffer:
            raise ConfigError("prefetching needs the dual-buffer cache layout")
        half = self.runtime.partition(self.thread).size
        for i, it in enumerate(plan.iterations):
            total = sum(e.length for e in it)
            if total > half:
                self._truncated(i, total, half)

    def _truncated(self, iteration: int, requested: int, staged: int) -> None:
        rec = {"iteration": iteration, "requested_bytes": requested, "staged_bytes": staged}
        if rec not in self.truncations:
            self.truncations.append(rec)
            (log.warning if len(self.truncations) == 1 else log.debug)("prefetch plan for iteration %d needs %d bytes, idle buffer holds %d",
                        iteration, requested, staged)

    def _close_iteration(self) -> None:
        if self._current is not None:
            self.per_iteration[self._current] = self.runtime.stall_us[self.thread] - self._mark

    def begin_iteration(self, i: int) -> float:
        """Barrier, swap and prefetch; returns the stall spent waiting at the barrier."""
        if self._current is not None and i != self._current + 1:
            raise ValueError(f"iteration {i} does not follow {self._current}")
        rt = self.runtime
        self._close_iteration()
        self._current = i
        self._mark = rt.stall_us[self.thread]
        if not self.enabled:
            rt.iteration = i
            return 0.0
        clock = rt.clock_for(self.thread)
        with rt._lock:
            # (1) barrier on this iteration's prefetches
            t0 = clock.now()
            ready = t0
            for r in rt.staged_ranges(self.thread):
                if r.staged_for <= i:
                    if r.pending:
                        rt._drain(r)
                    ready = max(ready, r.ready_at)
            stall = clock.now() - t0 + clock.advance_to(ready)
            rt.stall_us[self.thread] += stall
            rt.stats["barrier_stall_us"] += stall
            self.state.stall_accumulator += stall
            # (2)+(3) swap, expose staged ranges, clear the new idle buffer
            rt.swap_buffers(i, self.thread)
            self.state.active = BufferId(rt.partition(self.thread).active)
            # (4) prefetch the coming iterations into the idle buffer
            self.state.idle_tickets = self._stage(i)
            self.state.idle_ready = all(t.ready for t in self.state.idle_tickets)
        return stall

    def _stage(self, i: int) -> list[FetchTicket]:
        rt = self.runtime
        tickets = []
        for j in range(i + 1, i + 1 + self.plan.depth):
            requested = staged = 0
            for e in self.plan.reads_for(j):
                if rt.is_local(e.object_id):
                    continue
                requested += e.length
                for r in rt.stage(ObjectHandle(e.object_id, 0, True), e.offset, e.length, i + 1,
                                  self.thread, self.channel):
                    staged += r.length
                    tickets.append(FetchTicket(e.object_id, list(r.pending), rt.now(self.thread),
                                               (r.object_offset, r.length), self.thread, _range=r))
            if staged < requested and requested > rt.partition(self.thread).size:
                self._truncated(j, requested, staged)
        return tickets

    def end(self) -> None:
        """Close the books on the last iteration."""
        self._close_iteration()

    def stall_report(self) -> StallReport:
        per = dict(self.per_iteration)
        if self._current is not None and self._current not in per:
            per[self._current] = self.runtime.stall_us[self.thread] - self._mark
        return StallReport(sum(per.values()), per, list(self.truncations))


class PlanRecorder:
    """Derive a plan from the reads observed while attached (typically iteration 0)."""

    def __init__(self, runtime: Runtime, thread: Optional[int] = None):
        self.runtime = runtime
        self.thread = thread
        self.reads: list[PlanEntry] = []
        self._seen: set = set()

    def _observe(self, oid: int, offset: int, length: int, thread: int) -> None:
        if self.thread is not None and thread != self.thread:
            return
        e = PlanEntry(oid, offset, length)
        if e not in self._seen:
            self._seen.add(e)
            self.reads.append(e)

    def __enter__(self) -> "PlanRecorder":
        self.runtime.observers.append(self._observe)
        return self

    def __exit__(self, *exc) -> None:
        self.runtime.observers.remove(self._observe)

    def plan(self, depth: int = 1) -> IterationPlan:
        return IterationPlan.uniform(self.reads, depth)
