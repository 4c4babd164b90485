"""Worker pools: per-thread cache partitions, clusters sharing a fabric channel, shared-object locks."""
from __future__ import annotations

import math
import queue
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

from .errors import ConfigError, LockError
from .fabric.types import Completion, FabricOp
from .runtime import PREFETCH_CHANNEL_BASE, Runtime

CLUSTER_CHANNEL_BASE = 100


@dataclass(frozen=True)
class ThreadPoolConfig:
    threads: int
    cluster_size: int = 4

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not 1 <= self.cluster_size <= self.threads:
            raise ConfigError(f"cluster_size must be in [1, {self.threads}]")

    @classmethod
    def clamped(cls, threads: int, cluster_size: int = 4) -> "ThreadPoolConfig":
        """Config with the cluster size capped at the thread count."""
        return cls(threads, max(1, min(cluster_size, threads)))

    @property
    def clusters(self) -> int:
        return math.ceil(self.threads / self.cluster_size)

    def cluster_of(self, thread: int) -> int:
        if not 0 <= thread < self.threads:
            raise ConfigError(f"thread {thread} is not in a pool of {self.threads}")
        return thread // self.cluster_size

    def partition_bytes(self, buffer_half: int) -> int:
        return buffer_half // self.threads


class ClusterQueue:
    """Multi-producer queue feeding one fabric channel from a single dispatcher thread.

    Dispatch is global FIFO, so each producer's ops reach the channel in the
    order that producer enqueued them.
    """

    def __init__(self, fabric, channel: int, name: str = "cluster"):
        self.fabric = fabric
        self.channel = channel
        self._q: queue.Queue = queue.Queue()
        self.dispatched: list[tuple[int, int]] = []   # (thread, op_id) in channel order
        self._thread = threading.Thread(target=self._dispatch, name=f"dolma-{name}", daemon=True)
        self._thread.start()

    def _dispatch(self) -> None:
        while True:
            item = self._q.get()
            if item is None:
                return
            thread, op, issue_at, fut = item
            try:
                op_id = self.fabric.submit(self.channel, op, issue_at=issue_at)
            except Exception as exc:
                fut.set_exception(exc)
            else:
                self.dispatched.append((thread, op_id))
                fut.set_result(op_id)

    def put(self, thread: int, op: FabricOp, issue_at: Optional[float] = None) -> Future:
        fut: Future = Future()
        self._q.put((thread, op, issue_at, fut))
        return fut

    def close(self) -> None:
        self._q.put(None)
        self._thread.join()


class ThreadPool:
    def __init__(self, config: ThreadPoolConfig, runtime: Runtime):
        self.config = config
        self.runtime = runtime
        self.fabric = runtime.fabric
        self.channels = [CLUSTER_CHANNEL_BASE + c for c in range(config.clusters)]
        self.queues = [ClusterQueue(self.fabric, ch, f"cluster{c}") for c, ch in enumerate(self.channels)]
        per_thread = [self.channels[config.cluster_of(t)] for t in range(config.threads)]
        runtime.set_partitions(config.threads, per_thread, [PREFETCH_CHANNEL_BASE + ch for ch in per_thread])
        self._executor = ThreadPoolExecutor(max_workers=config.threads, thread_name_prefix="dolma-worker")
        self._locks: dict[int, threading.Lock] = {}
        self._owners: dict[int, int] = {}
        self._registry_lock = threading.Lock()

    @property
    def threads(self) -> int:
        return self.config.threads

    def channel_of(self, thread: int) -> int:
        return self.channels[self.config.cluster_of(thread)]

    def run(self, fn: Callable[[int], object]) -> list:
        """Run ``fn(thread_id)`` on every worker and return the results in thread order."""
        futures = [self._executor.submit(fn, t) for t in range(self.threads)]
        return [f.result() for f in futures]

    # -- fabric access ---------------------------------------------------------

    def submit(self, thread: int, op: FabricOp, issue_at: Optional[float] = None) -> int:
        return self.queues[self.config.cluster_of(thread)].put(thread, op, issue_at).result()

    def wait(self, thread: int, op_id: int) -> Completion:
        return self.fabric.wait(self.channel_of(thread), op_id)

    def fence(self, thread: int) -> None:
        self.fabric.fence(self.channel_of(thread))

    # -- shared objects ----------------------------------------------------------

    def register_shared(self, object_id: int) -> None:
        with self._registry_lock:
            self._locks.setdefault(object_id, threading.Lock())

    def shared_lock(self, object_id: int) -> None:
        lock = self._locks.get(object_id)
        if lock is None:
            raise LockError(f"object {object_id} is not registered as shared")
        me = threading.get_ident()
        if self._owners.get(object_id) == me:
            raise LockError(f"object {object_id} is already locked by this thread")
        lock.acquire()
        self._owners[object_id] = me

    def shared_unlock(self, object_id: int) -> None:
        lock = self._locks.get(object_id)
        if lock is None or self._owners.get(object_id) != threading.get_ident():
            raise LockError(f"object {object_id} is not locked by this thread")
        del self._owners[object_id]
        lock.release()

    def close(self) -> None:
        self._executor.shutdown(wait=True)
        for q in self.queues:
            q.close()

    def __enter__(self) -> "ThreadPool":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def create_pool(config: ThreadPoolConfig, runtime: Runtime) -> ThreadPool:
    return ThreadPool(config, runtime)


def submit_via_cluster(pool: ThreadPool, thread: int, op: FabricOp) -> int:
    return pool.submit(thread, op)


def shared_lock(pool: ThreadPool, object_id: int) -> None:
    pool.shared_lock(object_id)


def shared_unlock(pool: ThreadPool, object_id: int) -> None:
    pool.shared_unlock(object_id)
