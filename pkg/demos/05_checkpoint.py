"""Asynchronous checkpoints with selective update, then recovery.

Run: python3 demos/05_checkpoint.py
"""
import tempfile
from pathlib import Path

from dolma.checkpoint import checkpoint_async, materialize, read_checkpoint, recover
from dolma.fabric import SimFabric
from dolma.fabric.latency import KiB, MiB
from dolma.runtime import RegionLayout, Runtime


def runtime():
    return Runtime(RegionLayout(32 * KiB, 64 * KiB, 64 * KiB), SimFabric(8 * MiB), staging_bytes=0)


d = Path(tempfile.mkdtemp())
rt = runtime()
hs = [rt.alloc(n, tag=f"obj{i}") for i, n in enumerate((1000, 20 * KiB, 48 * KiB, 64 * KiB))]
for i, h in enumerate(hs):
    rt.write(h, 0, bytes([i + 1]) * 100)

t1 = checkpoint_async(rt, d / "epoch1.ck").wait()
print(f"epoch {t1.epoch}: copied {t1.fresh}, referenced {t1.referenced}")

rt.write(hs[2], 0, b"changed")
t2 = checkpoint_async(rt, d / "epoch2.ck").wait()
print(f"epoch {t2.epoch}: copied {t2.fresh}, referenced {t2.referenced}")
sizes = {p.name: p.stat().st_size for p in sorted(d.glob("*.ck"))}
print("file sizes:", sizes)

materialize(d / "epoch2.ck", d / "standalone.ck")
back = recover(d / "standalone.ck", runtime())
print("\nrecovered objects:")
for m in back.metadata_snapshot():
    print(f"  {m['tag']:5s} {m['location']:6s} first bytes {back.object_bytes(m['object_id'])[:8]!r}")
print("standalone file has", len(read_checkpoint(d / "standalone.ck").blobs), "inline blobs")
