"""Single-object prefetch loop used to measure the steady-state barrier stall."""
from dolma.fabric import SimFabric
from dolma.fabric.latency import INFINIBAND, LatencyModel, MiB
from dolma.prefetch import IterationPlan, PlanEntry, Prefetcher
from dolma.runtime import RegionLayout, Runtime


def flat_model(fetch_us: float) -> LatencyModel:
    """A profile where a 1 MiB transfer costs exactly ``fetch_us``."""
    return LatencyModel.from_table({k: {4096: 2.0, MiB: fetch_us} for k in INFINIBAND}, fixed_overhead_us=2.0)


def overlap_stalls(fetch_us: float, compute_us: float = 1000.0, iterations: int = 8,
                   windows: int = 2) -> dict[int, float]:
    """Each iteration reads one 1 MiB window of a single object, cycling through ``windows``.

    With two or more windows the window needed next is never already cached,
    so every iteration's prefetch is a real 1 MiB fetch. With one window the
    object stays cached and is copied across buffers instead.
    """
    rt = Runtime(RegionLayout(0, 4 * MiB, 1 * MiB), SimFabric(8 * MiB, flat_model(fetch_us)), staging_bytes=0)
    h = rt.alloc(windows * MiB)
    pf = Prefetcher(rt)
    pf.register_plan(IterationPlan([[PlanEntry(h.object_id, w * MiB, MiB)] for w in range(windows)], repeat=True))
    for i in range(iterations):
        pf.begin_iteration(i)
        rt.acquire(rt.read(h, (i % windows) * MiB, MiB))
        rt.charge(compute_us)
    pf.end()
    return pf.stall_report().per_iteration
