import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from _overlap import flat_model, overlap_stalls
from dolma.errors import ConfigError
from dolma.fabric import SimFabric
from dolma.fabric.latency import LatencyModel, MiB
from dolma.prefetch import IterationPlan, PlanEntry, PlanRecorder, Prefetcher
from dolma.runtime import RegionLayout, Runtime

KiB = 1024


@pytest.mark.parametrize("fetch,compute", [(800, 1000), (1500, 1000), (1000, 1000), (3000, 250)])
def test_overlap_law(fetch, compute):
    stalls = overlap_stalls(fetch, compute, iterations=10)
    for i in range(2, 10):
        assert stalls[i] == max(0.0, fetch - compute)


def test_resident_object_is_copied_not_refetched():
    stalls = overlap_stalls(1500, 1000, iterations=6, windows=1)
    assert all(stalls[i] == 0.0 for i in range(1, 6))


def test_plan_helpers(tmp_path):
    rt = Runtime(RegionLayout(0, 64 * KiB, 64 * KiB), SimFabric(MiB), staging_bytes=0)
    a = rt.alloc(8 * KiB, tag="a")
    plan = IterationPlan([[(a.object_id, 0, 100)], []], depth=2)
    assert plan.bytes_for(0) == 100 and plan.reads_for(1) == [] and plan.reads_for(5) == []
    assert IterationPlan.uniform([PlanEntry(a.object_id, 0, 10)]).reads_for(99)[0].length == 10
    with pytest.raises(ConfigError):
        IterationPlan(depth=0)
    path = tmp_path / "plan.json"
    path.write_text(json.dumps([[{"object_tag": "a", "offset": 4, "length": 12}]]))
    assert IterationPlan.load(path, rt).reads_for(0) == [PlanEntry(a.object_id, 4, 12)]
    path.write_text(json.dumps([[{"object_tag": "zz", "offset": 0, "length": 1}]]))
    with pytest.raises(ConfigError):
        IterationPlan.load(path, rt)


def test_prefetch_needs_dual_buffer():
    rt = Runtime(RegionLayout(0, 64 * KiB, 64 * KiB), SimFabric(MiB), dual_buffer=False, staging_bytes=0)
    h = rt.alloc(8 * KiB)
    with pytest.raises(ConfigError):
        Prefetcher(rt).register_plan(IterationPlan.uniform([PlanEntry(h.object_id, 0, 10)]))
    Prefetcher(rt).register_plan(IterationPlan())    # empty plan is plain on-demand


def test_iterations_must_be_consecutive():
    rt = Runtime(RegionLayout(0, 64 * KiB, 64 * KiB), SimFabric(MiB), staging_bytes=0)
    pf = Prefetcher(rt)
    pf.begin_iteration(0)
    with pytest.raises(ValueError):
        pf.begin_iteration(2)


def test_truncation_recorded():
    rt = Runtime(RegionLayout(0, 32 * KiB, 64 * KiB), SimFabric(MiB), staging_bytes=0)
    h = rt.alloc(64 * KiB)
    pf = Prefetcher(rt)
    pf.register_plan(IterationPlan.uniform([PlanEntry(h.object_id, 0, 64 * KiB)]))
    pf.begin_iteration(0)
    assert pf.stall_report().truncations[0]["requested_bytes"] == 64 * KiB
    assert pf.stall_report().truncations[0]["staged_bytes"] == 16 * KiB


def test_recorder_derives_plan():
    rt = Runtime(RegionLayout(0, 64 * KiB, 64 * KiB), SimFabric(MiB), staging_bytes=0)
    h = rt.alloc(8 * KiB)
    with PlanRecorder(rt) as rec:
        rt.acquire(rt.read(h, 0, 100))
        rt.acquire(rt.read(h, 0, 100))
        rt.acquire(rt.read(h, 200, 50))
    rt.acquire(rt.read(h, 0, 1))
    assert rec.plan().reads_for(3) == [PlanEntry(h.object_id, 0, 100), PlanEntry(h.object_id, 200, 50)]


def test_swap_serves_latest_bytes_and_single_residency():
    rt = Runtime(RegionLayout(0, 256 * KiB, 256 * KiB), SimFabric(4 * MiB), staging_bytes=64 * KiB)
    hs = [rt.alloc(16 * KiB) for _ in range(3)]
    oracle = [bytearray(16 * KiB) for _ in hs]
    pf = Prefetcher(rt)
    pf.register_plan(IterationPlan.uniform([PlanEntry(h.object_id, 0, 16 * KiB) for h in hs]))
    rng = random.Random(5)
    for i in range(12):
        pf.begin_iteration(i)
        for h, want in zip(hs, oracle):
            visible = [r for r in rt.entry(h).ranges if r.visible]
            for a in visible:
                for b in visible:
                    if a is not b:
                        assert a.end <= b.object_offset or b.end <= a.object_offset
            assert bytes(rt.acquire(rt.read(h, 0, 16 * KiB))) == bytes(want)
            off = rng.randrange(16 * KiB - 64)
            data = rng.randbytes(64)
            rt.write(h, off, data)
            want[off:off + 64] = data
        rt.charge(50)
    rt.flush()
    assert [rt.load(h) for h in hs] == [bytes(w) for w in oracle]


def _run(plan_on: bool, sizes, compute, iterations, model):
    rt = Runtime(RegionLayout(0, 4 * MiB, 1 * MiB), SimFabric(8 * MiB, model), staging_bytes=0)
    hs = [rt.alloc(n) for n in sizes]
    pf = Prefetcher(rt)
    if plan_on:
        pf.register_plan(IterationPlan.uniform([PlanEntry(h.object_id, 0, n) for h, n in zip(hs, sizes)]))
    for i in range(iterations):
        pf.begin_iteration(i)
        for h, n in zip(hs, sizes):
            pos = 0
            while pos < n:
                pos += len(rt.acquire(rt.read(h, pos, n - pos)))
            rt.charge(compute)
    return rt.now()


@given(st.lists(st.integers(4097, 1536 * KiB), min_size=1, max_size=3), st.floats(0, 3000),
       st.integers(1, 6), st.sampled_from([None, 800.0, 2500.0]))
@settings(max_examples=40)
def test_monotone_benefit_read_only(sizes, compute, iterations, fetch):
    model = LatencyModel.infiniband() if fetch is None else flat_model(fetch)
    on = _run(True, sizes, compute, iterations, model)
    off = _run(False, sizes, compute, iterations, model)
    assert on <= off + 1e-6
