"""Randomised multi-threaded fabric schedules through the cluster queues."""
import random
import time
from collections import Counter

from dolma.fabric import FabricOp, SimFabric, VirtualClock
from dolma.fabric.latency import MiB
from dolma.runtime import RegionLayout, Runtime
from dolma.threads import ThreadPoolConfig, create_pool

SLOTS = 4


def run_schedule(threads: int, cluster_size: int, seed: int, ops_per_thread: int = 150, fabric=None) -> dict:
    """Every thread writes, reads and fences its own words; returns what was checked.

    Checks, per thread: completions of its ops arrive in submission order,
    a read issued after a fence sees the thread's last write, and every
    signaled op yields exactly one completion while unsignaled ones yield none.
    """
    fabric = fabric or SimFabric(4 * MiB)
    rt = Runtime(RegionLayout(0, 64 * 1024 * threads, 64 * 1024), fabric, staging_bytes=0)
    words = [fabric.remote_alloc(8 * SLOTS) for _ in range(threads)]
    records = {t: [] for t in range(threads)}     # (op_id, signaled, consumed completion or None)
    fresh_checks = Counter()

    # C is capped at T, so T=2 with C=4 is one cluster of two
    with create_pool(ThreadPoolConfig.clamped(threads, cluster_size), rt) as pool:
        def worker(t: int):
            rng = random.Random(seed * 1000 + t)
            last = [0] * SLOTS
            for _ in range(ops_per_thread):
                slot = rng.randrange(SLOTS)
                addr = words[t] + 8 * slot
                r = rng.random()
                if r < 0.45:
                    v = rng.getrandbits(63)
                    signaled = rng.random() < 0.8
                    op_id = pool.submit(t, FabricOp.write(addr, v.to_bytes(8, "little"), signaled=signaled))
                    last[slot] = v
                    records[t].append((op_id, signaled, None))
                elif r < 0.8:
                    buf = bytearray(8)
                    op_id = pool.submit(t, FabricOp.read(addr, buf))
                    records[t].append((op_id, True, None))
                else:
                    pool.fence(t)
                    buf = bytearray(8)
                    op_id = pool.submit(t, FabricOp.read(addr, buf))
                    c = pool.wait(t, op_id)
                    assert c.ok, c
                    got = int.from_bytes(buf, "little")
                    assert got == last[slot], f"thread {t}: read after fence saw {got}, wrote {last[slot]}"
                    fresh_checks[t] += 1
                    records[t].append((op_id, True, c))
            return t

        pool.run(worker)
        if isinstance(fabric.clock, VirtualClock):
            fabric.clock.advance(1e12)
        expected = Counter(rt.channel_for(t) for t, recs in records.items()
                           for _, signaled, consumed in recs if signaled and consumed is None)
        # gather the remaining completions per channel
        polled = {}
        deadline = time.monotonic() + 30
        for ch, want in expected.items():
            n = 0
            while n < want and time.monotonic() < deadline:
                got = fabric.poll(ch, 64)
                if not got:
                    time.sleep(0.001)
                for c in got:
                    assert (ch, c.op_id) not in polled, f"duplicate completion for op {c.op_id}"
                    polled[(ch, c.op_id)] = c
                    n += 1
            time.sleep(0.01)
            for c in fabric.poll(ch, 64):
                polled[(ch, c.op_id)] = c      # anything extra fails the checks below

    signaled_total = 0
    for t, recs in records.items():
        ch = rt.channel_for(t)
        ids = [op_id for op_id, _, _ in recs]
        assert ids == sorted(ids), f"thread {t}: op ids not increasing"
        times = []
        for op_id, signaled, consumed in recs:
            c = consumed or polled.pop((ch, op_id), None)
            if signaled:
                signaled_total += 1
                assert c is not None, f"thread {t}: signaled op {op_id} has no completion"
                times.append(c.completed_at)
            else:
                assert c is None, f"thread {t}: unsignaled op {op_id} produced a completion"
        assert times == sorted(times), f"thread {t}: completions out of submission order"
    assert not polled, f"completions for unknown ops: {sorted(polled)[:5]}"
    return {"signaled": signaled_total, "fresh_checks": sum(fresh_checks.values())}
