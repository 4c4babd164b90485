"""Object placement, remote reads with deferred barriers, and demotion.

Run: python3 demos/02_runtime.py
"""
from dolma.fabric import SimFabric
from dolma.fabric.latency import KiB, MiB
from dolma.runtime import RegionLayout, Runtime

# 256 KiB for local objects, 128 KiB of remote-object cache, 64 KiB of metadata
rt = Runtime(RegionLayout(256 * KiB, 128 * KiB, 64 * KiB), SimFabric(16 * MiB), staging_bytes=0)

small = rt.alloc(2 * KiB, tag="scalars")
grid = rt.alloc(192 * KiB, tag="grid")
big = rt.alloc(1 * MiB, tag="matrix")        # larger than the local region: goes remote
for h in (small, grid, big):
    print(f"{rt.descriptor(h).tag:8s} {rt.descriptor(h).size:>8} B  {rt.location(h).name}")

rt.write(big, 0, b"remote bytes")
t0 = rt.now()
ticket = rt.read(big, 0, 12)                 # issues the fetch, does not wait
rt.charge(3.0)                               # compute overlaps the fetch
data = rt.acquire(ticket)                    # the barrier is deferred to first use
print(f"\nacquired {bytes(data)!r} after {rt.now() - t0:.2f} us, stalled {rt.stats['acquire_stall_us']:.2f} us")

# a new object that does not fit evicts by rank: largest, least accessed first
extra = rt.alloc(128 * KiB, tag="extra")
print("\nafter allocating 128 KiB more:")
for h in (small, grid, extra):
    print(f"  {rt.descriptor(h).tag:8s} {rt.location(h).name}")
print(f"local usage {rt.local_usage()} of budget {rt.layout.budget} B, peak {rt.peak_local}")
