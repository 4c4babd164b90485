"""Run workloads against the all-local oracle and the disaggregated runtime.

Compute is modelled: every chunk the kernel touches charges its local
memory access cost plus a compute cost proportional to its size on the
thread's clock. Threads are interleaved deterministically by always
advancing the thread whose clock is furthest behind.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np

from .. import runtime as rtm
from ..fabric.latency import MiB, LatencyModel
from ..fabric.sim import SimFabric
from ..fabric.types import OpKind, Pattern
from ..prefetch import IterationPlan, PlanEntry, Prefetcher
from ..runtime import ObjectHandle, RegionLayout, Runtime
from ..threads import ThreadPoolConfig, create_pool
from .workloads import AccessPattern, WorkloadSpec, preset

log = logging.getLogger(__name__)

FRACTIONS = (0.01, 0.05, 0.20, 0.50, 0.70, 1.00)
MIN_PARTITION = 4096
DEFAULT_STAGING = 4 * MiB
RAMP_BYTES = 64 * 1024     # first fetch of an empty pipeline
STATUS_OK = "OK"
STATUS_DEGENERATE = "DEGENERATE"


@dataclass
class RunReport:
    spec_name: str
    fraction: float
    threads: int
    dual_buffer: bool
    async_write: bool
    oracle_time_us: float
    dolma_time_us: Optional[float]
    degradation: Optional[float]
    peak_local_bytes: Optional[int]
    oracle_peak_bytes: int
    local_reduction: Optional[float]
    stall_us: Optional[float]
    budget_bytes: int = 0
    allowance_bytes: int = 0
    status: str = STATUS_OK
    chunk_bytes: int = 0
    chunks: int = 0
    op_counts: dict = field(default_factory=dict)
    op_bytes: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OracleResult:
    time_us: float
    peak_bytes: int
    peak_large_share: float
    max_live_objects: int


class _Live:
    """Live-object bookkeeping for the oracle pass (peak composition)."""

    def __init__(self, page_size: int):
        self.page_size = page_size
        self.total = self.large = self.count = 0
        self.peak = self.peak_large = self.peak_count = 0

    def add(self, size: int, sign: int = 1) -> None:
        self.total += sign * size
        self.count += sign
        if size > self.page_size:
            self.large += sign * size
        if self.total > self.peak:
            self.peak, self.peak_large = self.total, self.large
        self.peak_count = max(self.peak_count, self.count)


class _Pass:
    def __init__(self, spec: WorkloadSpec, rt: Runtime, threads: int, model: LatencyModel,
                 prefetch: bool, verify: bool = False):
        self.spec = spec
        self.rt = rt
        self.threads = threads
        self.verify = verify
        self.rng = np.random.default_rng(spec.seed)
        self.pattern = Pattern.RAND if spec.pattern is not AccessPattern.SEQ_STRIDE else Pattern.SEQ
        rt.pattern = self.pattern
        self.model = model
        local = model.baseline()
        self.read_rate = local.estimate(OpKind.READ, self.pattern, 4 * MiB) / (4 * MiB)
        self.write_rate = local.estimate(OpKind.WRITE, self.pattern, 4 * MiB) / (4 * MiB)
        streamed = max(1, spec.streamed_bytes)
        self.compute_rate = spec.iteration_compute_us() / streamed * (1 if spec.scalable else threads)
        half = rt.partition(0).size if rt.layout.remote_cache_bytes else 0
        self.step = spec.block_bytes if half == 0 else max(8, min(spec.block_bytes, half // 2) // 8 * 8)
        self.prefetch = prefetch
        self.live = _Live(rt.page_size)
        self.handles: list[ObjectHandle] = []     # long-lived, streamed
        self.others: list[ObjectHandle] = []      # long-lived, not streamed
        self.shadow: dict[int, bytearray] = {}
        self.chunk_count = 0

    # -- helpers ---------------------------------------------------------------

    def _size(self, pop) -> int:
        if not pop.size_jitter:
            return pop.size_bytes
        u = self.rng.uniform(-pop.size_jitter, pop.size_jitter)
        return max(1, int(pop.size_bytes * (1 + u)))

    def _charge_access(self, t: int, read: int, written: int, compute: bool = True) -> None:
        us = read * self.read_rate + written * self.write_rate
        if compute:
            us += read * self.compute_rate
        self.rt.charge(us, t)

    def _written(self, off: int, n: int) -> int:
        """Bytes the kernel writes into chunk ``[off, off+n)``.

        Taken as a difference of the cumulative count so an object's total
        does not depend on how it is chunked, and so not on the budget.
        """
        wf = self.spec.write_fraction
        return int((off + n) * wf) - int(off * wf)

    def _write(self, h: ObjectHandle, off: int, data: bytes, t: int) -> None:
        self.rt.write(h, off, data, thread=t)
        if self.verify and h.object_id in self.shadow:
            self.shadow[h.object_id][off:off + len(data)] = data

    def _issue(self, h: ObjectHandle, off: int, n: int, t: int) -> list:
        """Start reads covering as much of ``[off, off+n)`` as the cache admits.

        Cache hits are free, so issuing continues past them; it stops after the
        first real fetch, which already takes the largest prefix that fits.
        """
        tickets, got = [], 0
        while got < n:
            tk = self.rt.read(h, off + got, n - got, thread=t)
            tickets.append(tk)
            got += tk.satisfied_range[1]
            if not tk.ready:
                break
        return tickets

    def _read_all(self, h: ObjectHandle, off: int, n: int, t: int, tickets=()) -> None:
        got = sum(self.rt.acquire(tk).nbytes for tk in tickets)
        while got < n:
            got += self.rt.acquire(self.rt.read(h, off + got, n - got, thread=t)).nbytes

    def _next_piece(self, m: int, left: int) -> int:
        """Largest piece (at least ``m``) whose modelled fetch hides behind computing ``m`` bytes."""
        budget = m * (self.read_rate + self.compute_rate)
        lo, hi = m, max(m, left)
        if self.model.transfer_time(OpKind.READ, self.pattern, hi) <= budget:
            return hi
        while hi - lo > 8:
            mid = (lo + hi) // 2
            if self.model.transfer_time(OpKind.READ, self.pattern, mid) <= budget:
                lo = mid
            else:
                hi = mid
        return lo

    # -- phases ------------------------------------------------------------------

    def setup(self) -> None:
        """Allocate every long-lived array, then initialise them in allocation order."""
        made = []
        for pop in self.spec.populations:
            if pop.lifetime != "long":
                continue
            for _ in range(pop.count):
                size = self._size(pop)
                h = self.rt.alloc(size, tag=pop.tag)
                self.live.add(size)
                (self.handles if pop.streamed else self.others).append(h)
                if self.verify:
                    self.shadow[h.object_id] = bytearray(size)
                made.append((h, size))
        for h, size in made:
            for off in range(0, size, self.spec.block_bytes):
                n = min(self.spec.block_bytes, size - off)
                self._write(h, off, bytes([(h.object_id * 13 + off // 4096) & 0xFF]) * n, 0)
                self.rt.write_behind(h, off, n, 0)
                self._charge_access(0, 0, n, compute=False)

    def owned(self, t: int) -> list[ObjectHandle]:
        return [h for i, h in enumerate(self.handles) if i % self.threads == t]

    def chunks(self, t: int, it: int) -> list[tuple[ObjectHandle, int, int]]:
        out = []
        for h in self.owned(t):
            size = self.rt.descriptor(h).size
            # n nearly equal pieces, so no tiny tail chunk breaks the fetch/compute pipeline
            n = math.ceil(size / self.step)
            bounds = [k * size // n // 8 * 8 for k in range(n)] + [size]
            if self.spec.pattern is AccessPattern.SEQ_STRIDE:
                order = [k for r in range(self.spec.stride) for k in range(r, n, self.spec.stride)]
            else:
                order = np.random.default_rng([self.spec.seed, it, h.object_id]).permutation(n).tolist()
            out.extend((h, bounds[k], bounds[k + 1] - bounds[k]) for k in order)
        return out

    def plan(self, t: int) -> IterationPlan:
        """Expected remote reads of thread ``t``; locally resident objects need no prefetch."""
        return IterationPlan([[PlanEntry(h.object_id, off, n) for h, off, n in self.chunks(t, it)
                               if not self.rt.is_local(h)]
                              for it in range(self.spec.iterations)])

    def kernel(self, t: int, it: int) -> Iterator[None]:
        chunks = self.chunks(t, it)
        fill = bytes([(it * 31 + t + 1) & 0xFF])
        if self.spec.pattern is AccessPattern.CHAINED_DEPENDENT:
            # each chunk's address depends on the previous one: nothing to fetch ahead
            for h, off, n in chunks:
                self._read_all(h, off, n, t)
                w = self._written(off, n)
                if w:
                    self._write(h, off, fill * w, t)
                    self.rt.write_behind(h, off, w, t)
                self._charge_access(t, n, w)
                self.chunk_count += 1
                yield
        else:
            yield from self._pipelined(chunks, fill, t)
        if t == 0:
            for h in self.others:
                self._read_all(h, 0, 8, t)
                self._write(h, 0, fill * 8, t)
                self._charge_access(t, 8, 8)

    def _pipelined(self, chunks, fill: bytes, t: int) -> Iterator[None]:
        """Stream the chunks with one piece in flight while the previous one computes.

        The pipeline starts empty, so the first piece is small and each next
        piece is as large as the compute on the current one can hide, up to a
        whole chunk. Pieces never straddle chunks; a chunk's writes happen once
        its last piece has been read.
        """
        k, pos = 0, chunks[0][1] if chunks else 0
        limit = RAMP_BYTES

        def take():
            nonlocal k, pos, limit
            if k >= len(chunks):
                return None
            h, off, n = chunks[k]
            rest = off + n - pos
            m = rest if self.rt.is_local(h) else min(limit, rest)
            if 0 < rest - m < m // 2:
                # halve the remainder instead of leaving a sliver that could not hide the next fetch
                m = max(8, rest // 2 // 8 * 8)
            piece = (k, h, pos, m)
            pos += m
            if pos >= off + n:
                k += 1
                pos = chunks[k][1] if k < len(chunks) else 0
            return piece

        cur = take()
        tickets = self._issue(*cur[1:], t) if cur else []
        while cur is not None:
            ck, h, at, m = cur
            self._read_all(h, at, m, t, tickets)
            _, off, n = chunks[ck]
            last = at + m == off + n
            w = self._written(off, n) if last else 0
            if w:
                self._write(h, off, fill * w, t)
            if limit < self.step:
                grown = self._next_piece(m, self.step)
                limit = grown if grown > m else self.step
            # deferred barrier: start the next fetch before computing on this piece
            cur = take()
            tickets = self._issue(*cur[1:], t) if cur else []
            if w:
                # this chunk is done for the iteration; its write-back overlaps the compute
                self.rt.write_behind(h, off, w, t)
            self._charge_access(t, m, w)
            if last:
                self.chunk_count += 1
                yield

    def short_lived(self, it: int) -> list[ObjectHandle]:
        made = []
        for pop in self.spec.populations:
            if pop.lifetime != "short":
                continue
            per = pop.count // self.spec.iterations + (1 if it < pop.count % self.spec.iterations else 0)
            for _ in range(per):
                size = self._size(pop)
                h = self.rt.alloc(size, tag=pop.tag)
                self.live.add(size)
                self._write(h, 0, b"\x01" * size, 0)
                self._charge_access(0, 0, size, compute=False)
                made.append(h)
        return made

    def barrier(self) -> float:
        end = max(self.rt.now(t) for t in range(self.threads))
        for t in range(self.threads):
            self.rt.clock_for(t).advance_to(end)
        return end

    def run(self) -> float:
        rt = self.rt
        start = rt.now(0)
        self.setup()
        prefetchers = [Prefetcher(rt, t) for t in range(self.threads)]
        if self.prefetch:
            for t, pf in enumerate(prefetchers):
                pf.register_plan(self.plan(t))
        for it in range(self.spec.iterations):
            self.barrier()
            for pf in prefetchers:
                pf.begin_iteration(it)
            temps = self.short_lived(it)
            gens = {t: self.kernel(t, it) for t in range(self.threads)}
            while gens:
                t = min(gens, key=lambda t: (rt.now(t), t))
                try:
                    next(gens[t])
                except StopIteration:
                    del gens[t]
            for h in temps:
                self.live.add(rt.descriptor(h).size, -1)
                rt.free(h)
        for pf in prefetchers:
            pf.end()
        self.prefetchers = prefetchers
        return self.barrier() - start

    def check(self) -> None:
        """Compare every long-lived object against the shadow copy."""
        for oid, expect in self.shadow.items():
            got = self.rt.load(self.rt.handle(oid))
            if got != bytes(expect):
                raise AssertionError(f"object {oid} differs from its expected contents")


def _oracle_runtime(spec: WorkloadSpec, threads: int) -> Runtime:
    big = spec.total_bytes * 2 + MiB
    fab = SimFabric(MiB, LatencyModel.infiniband())
    rt = Runtime(RegionLayout(big, 0, 0), fab, staging_bytes=0)
    rt.set_partitions(threads)
    return rt


def run_oracle(spec: WorkloadSpec, threads: Optional[int] = None, model: Optional[LatencyModel] = None) -> OracleResult:
    """All-local pass: execution time and peak object footprint."""
    threads = threads or spec.threads
    model = model or LatencyModel.default()
    p = _Pass(spec, _oracle_runtime(spec, threads), threads, model, prefetch=False)
    t = p.run()
    share = p.live.peak_large / p.live.peak if p.live.peak else 0.0
    return OracleResult(t, p.rt.peak_local, share, p.live.peak_count)


def layout_for(fraction: float, oracle_peak: int, allowance: int) -> RegionLayout:
    """Local budget of ``fraction`` of the oracle peak plus the metadata allowance."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    budget = int(fraction * oracle_peak)
    if fraction >= 1:
        return RegionLayout(budget, 0, allowance)
    cache = budget // 2 // 16 * 16
    return RegionLayout(budget - cache, cache, allowance)


def run_workload(spec: WorkloadSpec, fraction: float, *, dual_buffer: bool = True, async_write: bool = True,
                 threads: Optional[int] = None, cluster_size: int = 4, model: Optional[LatencyModel] = None,
                 fabric=None, staging_bytes: int = DEFAULT_STAGING, oracle: Optional[OracleResult] = None,
                 verify: bool = False, access_profile: Optional[dict] = None) -> RunReport:
    """Oracle pass, then the disaggregated pass at ``fraction`` of the oracle peak."""
    threads = threads or spec.threads
    model = model or LatencyModel.default()
    oracle = oracle or run_oracle(spec, threads, model)
    staging = staging_bytes if async_write else 0
    allowance = rtm.ENTRY_BYTES * (oracle.max_live_objects + 16) + staging
    layout = layout_for(fraction, oracle.peak_bytes, allowance)
    config = {"spec": spec.to_dict(), "fraction": fraction, "threads": threads, "cluster_size": cluster_size,
              "dual_buffer": dual_buffer, "async_write": async_write, "model": model.name,
              "staging_bytes": staging, "layout": asdict(layout)}
    report = RunReport(spec.name, fraction, threads, dual_buffer, async_write, oracle.time_us, None, None,
                       None, oracle.peak_bytes, None, None, layout.budget, allowance, config=config)

    buffers = 2 if dual_buffer else 1
    part = layout.remote_cache_bytes // buffers // threads
    if fraction < 1 and part < MIN_PARTITION:
        report.status = STATUS_DEGENERATE
        report.chunk_bytes = part // 2
        report.chunks = math.ceil(spec.streamed_bytes / max(1, part // 2)) * spec.iterations
        return report

    own = fabric is None
    if own:
        fabric = SimFabric(int(spec.total_bytes * 1.25) + 64 * 1024 * 16 + 4 * MiB, model)
    rt = Runtime(layout, fabric, dual_buffer=dual_buffer, staging_bytes=staging, profile=access_profile)
    pool = create_pool(ThreadPoolConfig.clamped(threads, cluster_size), rt)
    try:
        p = _Pass(spec, rt, threads, model, prefetch=dual_buffer, verify=verify)
        elapsed = p.run()
        if verify:
            p.check()
        report.dolma_time_us = elapsed
        report.degradation = elapsed / oracle.time_us - 1 if oracle.time_us else 0.0
        report.peak_local_bytes = rt.peak_local
        report.local_reduction = 1 - rt.peak_local / oracle.peak_bytes
        report.stall_us = float(sum(rt.stall_us.values()))
        report.chunk_bytes = p.step
        report.chunks = p.chunk_count
        report.op_counts = dict(sorted(fabric.op_counts.items()))
        report.op_bytes = dict(sorted(fabric.op_bytes.items()))
        report.stats = {k: v for k, v in sorted(rt.stats.items())}
        if rt.peak_local > fraction * oracle.peak_bytes + allowance:
            raise AssertionError("local usage exceeded the configured budget")
    finally:
        pool.close()
        if not own:
            for d in rt.objects():
                rt.free(d.object_id)
    return report


def sweep(spec: WorkloadSpec, fractions=FRACTIONS, **kw) -> list[RunReport]:
    model = kw.get("model") or LatencyModel.default()
    kw["model"] = model
    oracle = run_oracle(spec, kw.get("threads") or spec.threads, model)
    return [run_workload(spec, f, oracle=oracle, **kw) for f in fractions]


SIZE_SCALES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0)


def size_sweep(name: str = "cg", scales=SIZE_SCALES, budget_share: float = 0.01, **kw) -> list[RunReport]:
    """Scale a preset across input sizes under one fixed local budget.

    The budget is ``budget_share`` of the oracle peak at scale 1, so smaller
    inputs get a larger fraction of their own peak and larger ones less.
    """
    model = kw.get("model") or LatencyModel.default()
    kw["model"] = model
    budget = budget_share * run_oracle(preset(name), kw.get("threads"), model).peak_bytes
    out = []
    for s in scales:
        spec = preset(name, scale=s)
        oracle = run_oracle(spec, kw.get("threads"), model)
        out.append(run_workload(spec, min(1.0, budget / oracle.peak_bytes), oracle=oracle, **kw))
    return out


# -- microbenchmark -----------------------------------------------------------------

@dataclass
class MicrobenchRow:
    kind: str
    pattern: str
    size_bytes: int
    local_us: float
    remote_us: float
    slowdown: float


DEFAULT_SIZES = tuple(4096 << i for i in range(0, 11))     # 4 KiB .. 4 MiB


def run_microbench(profile: Optional[LatencyModel] = None, sizes=DEFAULT_SIZES, patterns=tuple(Pattern),
                   kinds=(OpKind.READ, OpKind.WRITE)) -> list[MicrobenchRow]:
    """Local-vs-remote latency and slowdown for every (kind, pattern, size)."""
    model = profile or LatencyModel.default()
    local = model.baseline()
    rows = []
    for kind in kinds:
        for pattern in patterns:
            for size in sizes:
                if not 1 <= size <= 4 << 30:
                    raise ValueError(f"size {size} outside [1 B, 4 GiB]")
                lo = local.transfer_time(kind, pattern, size)
                re = model.transfer_time(kind, pattern, size)
                rows.append(MicrobenchRow(kind.value, pattern.value, size, lo, re, re / lo))
    return rows
