"""First-fit range allocator with coalescing, used for remote regions and cache buffers."""
from __future__ import annotations

import bisect

from .errors import DoubleFree, RemoteOOM


def align_up(n: int, align: int) -> int:
    return (n + align - 1) // align * align


class RangeAllocator:
    """Hands out disjoint ``[start, start + length)`` ranges of ``[0, capacity)``.

    The free list is kept sorted by start offset and adjacent free ranges are
    merged on release, so ``allocated + free`` always tiles the whole space.
    """

    def __init__(self, capacity: int, align: int = 8):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.align = align
        usable = capacity - capacity % align
        self._starts: list[int] = [0] if usable else []
        self._lengths: list[int] = [usable] if usable else []
        self.allocated: dict[int, int] = {}
        self.used = 0

    @property
    def free_ranges(self) -> list[tuple[int, int]]:
        return list(zip(self._starts, self._lengths))

    def largest_free(self) -> int:
        return max(self._lengths, default=0)

    def fits(self, size: int) -> bool:
        return align_up(size, self.align) <= self.largest_free()

    def alloc(self, size: int) -> int:
        if size < 1:
            raise ValueError("size must be >= 1")
        need = align_up(size, self.align)
        for i, length in enumerate(self._lengths):
            if length >= need:
                start = self._starts[i]
                if length == need:
                    del self._starts[i]
                    del self._lengths[i]
                else:
                    self._starts[i] = start + need
                    self._lengths[i] = length - need
                self.allocated[start] = need
                self.used += need
                return start
        raise RemoteOOM(f"no free range of {size} bytes (largest {self.largest_free()})")

    def free(self, start: int) -> None:
        length = self.allocated.pop(start, None)
        if length is None:
            raise DoubleFree(f"offset {start} is not allocated")
        self.used -= length
        i = bisect.bisect_left(self._starts, start)
        self._starts.insert(i, start)
        self._lengths.insert(i, length)
        # merge with right neighbour, then left
        if i + 1 < len(self._starts) and start + length == self._starts[i + 1]:
            self._lengths[i] += self._lengths.pop(i + 1)
            del self._starts[i + 1]
        if i > 0 and self._starts[i - 1] + self._lengths[i - 1] == start:
            self._lengths[i - 1] += self._lengths.pop(i)
            del self._starts[i]

    def size_of(self, start: int) -> int:
        return self.allocated[start]

    def reserve(self, start: int, length: int) -> None:
        """Mark an exact range as allocated (used when restoring a snapshot)."""
        for i, (s, n) in enumerate(zip(self._starts, self._lengths)):
            if s <= start and start + length <= s + n:
                del self._starts[i]
                del self._lengths[i]
                pieces = [(s, start - s), (start + length, s + n - start - length)]
                for ps, pn in reversed(pieces):
                    if pn:
                        self._starts.insert(i, ps)
                        self._lengths.insert(i, pn)
                self.allocated[start] = length
                self.used += length
                return
        raise RemoteOOM(f"range [{start}, {start + length}) is not free")

    def state(self) -> tuple[tuple[tuple[int, int], ...], tuple[tuple[int, int], ...]]:
        return tuple(sorted(self.allocated.items())), tuple(self.free_ranges)
