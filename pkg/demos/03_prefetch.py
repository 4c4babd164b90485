"""Dual-buffer prefetch hides a fetch behind compute.

Each iteration reads one 1 MiB window of an object while the next window is
prefetched into the idle buffer. The steady-state stall is the part of the
fetch that compute cannot cover.

Run: python3 demos/03_prefetch.py
"""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))
from _overlap import overlap_stalls  # noqa: E402

compute = 1000.0
for fetch in (500.0, 800.0, 1000.0, 1500.0, 3000.0):
    stalls = overlap_stalls(fetch, compute, iterations=6)
    steady = stalls[5]
    print(f"fetch {fetch:6.0f} us, compute {compute:.0f} us -> stall per iteration {steady:6.1f} us"
          f"  (max(0, fetch - compute) = {max(0.0, fetch - compute):.1f})")
