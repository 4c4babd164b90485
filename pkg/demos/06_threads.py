"""Thread clusters sharing channels, fences and remote atomics.

Run: python3 demos/06_threads.py
"""
from dolma.fabric import FabricOp, SimFabric
from dolma.fabric.latency import KiB, MiB
from dolma.runtime import RegionLayout, Runtime
from dolma.threads import ThreadPoolConfig, create_pool

fab = SimFabric(4 * MiB)
rt = Runtime(RegionLayout(0, 256 * KiB, 64 * KiB), fab, staging_bytes=0)
cfg = ThreadPoolConfig(threads=8, cluster_size=4)
counter = fab.remote_alloc(8)
slots = fab.remote_alloc(8 * 8)

with create_pool(cfg, rt) as pool:
    print(f"{cfg.threads} threads in {cfg.clusters} clusters; channels:",
          [pool.channel_of(t) for t in range(cfg.threads)])
    print("cache partition per thread:", [rt.partition(t).size for t in range(cfg.threads)])

    def work(t):
        for _ in range(500):
            pool.wait(t, pool.submit(t, FabricOp.fadd(counter, 1)))
        word = slots + 8 * t
        pool.submit(t, FabricOp.write(word, (t * 11).to_bytes(8, "little"), signaled=False))
        pool.fence(t)                              # everything before is complete
        buf = bytearray(8)
        pool.wait(t, pool.submit(t, FabricOp.read(word, buf)))
        return int.from_bytes(buf, "little")

    seen = pool.run(work)

print("each thread read its own write after a fence:", seen)
print("8 threads x 500 fetch-adds =", fab.atomic_fadd(counter, 0))
