"""Clocks measured in microseconds.

The virtual clock never sleeps; it only records how far simulated time has
advanced. The wall clock adds charged compute time on top of real elapsed
time so the same runtime code drives both backends.
"""
from __future__ import annotations

import threading
import time


class VirtualClock:
    def __init__(self, start: float = 0.0):
        self._now = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        return self._now

    def advance(self, dt: float) -> float:
        if dt < 0:
            raise ValueError(f"cannot advance by negative time {dt}")
        with self._lock:
            self._now += dt
            return self._now

    def advance_to(self, t: float) -> float:
        """Move forward to ``t``; returns the wait incurred (0 if ``t`` is in the past)."""
        with self._lock:
            waited = max(0.0, t - self._now)
            self._now += waited
            return waited

    def fork(self) -> "VirtualClock":
        return VirtualClock(self._now)


class WallClock:
    """Real elapsed time plus explicitly charged (modelled) compute time."""

    def __init__(self):
        self._t0 = time.monotonic()
        self._charged = 0.0

    def now(self) -> float:
        return (time.monotonic() - self._t0) * 1e6 + self._charged

    def advance(self, dt: float) -> float:
        if dt < 0:
            raise ValueError(f"cannot advance by negative time {dt}")
        self._charged += dt
        return self.now()

    def advance_to(self, t: float) -> float:
        now = self.now()
        if t > now:
            self._charged += t - now
            return t - now
        return 0.0

    def fork(self) -> "WallClock":
        """Per-thread clock sharing the origin; charges from here on are its own."""
        c = WallClock()
        c._t0, c._charged = self._t0, self._charged
        return c
