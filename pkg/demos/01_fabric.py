"""Calibrated latency model, the simulated fabric, and the same ops over TCP.

Run: python3 demos/01_fabric.py
"""
from dolma.fabric import FabricOp, OpKind, Pattern, SimFabric, TcpFabric, estimate_latency
from dolma.fabric.latency import KiB, LatencyModel, MiB
from dolma.memnode import MemoryNode

ib, local = LatencyModel.infiniband(), LatencyModel.local_baseline()

print("remote vs local sequential read latency")
for size in (4 * KiB, 32 * KiB, 512 * KiB, 4 * MiB):
    r = estimate_latency(OpKind.READ, Pattern.SEQ, size)
    l = estimate_latency(OpKind.READ, Pattern.SEQ, size, local)
    print(f"  {size // KiB:>5} KiB  remote {r:8.2f} us  local {l:8.2f} us  slowdown {r / l:6.2f}x")

# the simulator runs on a virtual clock: submit returns at once, completions carry modelled times
sim = SimFabric(16 * MiB, ib)
a = sim.remote_alloc(4 * MiB)
op = sim.submit(0, FabricOp.write(a, b"\x07" * (4 * MiB)))
done = sim.wait(0, op)
print(f"\n4 MiB write on the simulator completed at t={done.completed_at:.2f} us")
buf = bytearray(8)
sim.wait(0, sim.submit(0, FabricOp.read(a, buf)))
print("read back:", bytes(buf))

# a memory node serves the same protocol over loopback TCP
with MemoryNode(capacity=16 * MiB) as node:
    tcp = TcpFabric(node.address)
    b = tcp.remote_alloc(64)
    tcp.write_sync(b, b"over the wire")
    print("\nTCP memory node at %s:%d returned %r" % (*node.address, tcp.read_sync(b, 13)))
    print("fetch-add returns the previous word:", tcp.atomic_fadd(b + 16, 5), tcp.atomic_fadd(b + 16, 5))
    tcp.close()
