"""Which data objects go to remote memory.

Large objects are ranked for demotion by size (largest first), then by total
accesses (fewest first), then by writes (most first), then by id.
"""
from __future__ import annotations

import enum
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

PAGE_SIZE = 4096


class Location(enum.Enum):
    LOCAL = "LOCAL"
    REMOTE = "REMOTE"
    REMOTE_CACHED = "REMOTE_CACHED"


class SizeClass(enum.Enum):
    SMALL = "SMALL"
    LARGE = "LARGE"


@dataclass
class ObjectDescriptor:
    object_id: int
    size: int
    read_count: int = 0
    write_count: int = 0
    alloc_iteration: int = 0
    free_iteration: Optional[int] = None
    location: Location = Location.LOCAL
    tag: Optional[str] = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("size must be >= 1")
        if self.read_count < 0 or self.write_count < 0:
            raise ValueError("access counts must be >= 0")
        if self.free_iteration is not None and self.free_iteration < self.alloc_iteration:
            raise ValueError("free_iteration precedes alloc_iteration")

    @property
    def accesses(self) -> int:
        return self.read_count + self.write_count

    def count_read(self, n: int = 1) -> None:
        with self._lock:
            self.read_count += n

    def count_write(self, n: int = 1) -> None:
        with self._lock:
            self.write_count += n


def classify(desc: ObjectDescriptor, page_size: int = PAGE_SIZE) -> SizeClass:
    return SizeClass.LARGE if desc.size > page_size else SizeClass.SMALL


def remote_rank_key(desc: ObjectDescriptor) -> tuple[int, int, int, int]:
    return (-desc.size, desc.accesses, -desc.write_count, desc.object_id)


def rank_for_remote(objects) -> list[ObjectDescriptor]:
    """Order objects from most to least suitable for remote placement."""
    return sorted(objects, key=remote_rank_key)


@dataclass
class VictimSelection:
    victims: list[ObjectDescriptor]
    insufficient: bool

    @property
    def total(self) -> int:
        return sum(d.size for d in self.victims)


def select_victims(resident, needed: int) -> VictimSelection:
    """Shortest ranked prefix of ``resident`` whose sizes add up to ``needed``."""
    if needed <= 0:
        return VictimSelection([], False)
    chosen, total = [], 0
    for desc in rank_for_remote(resident):
        chosen.append(desc)
        total += desc.size
        if total >= needed:
            return VictimSelection(chosen, False)
    return VictimSelection(chosen, True)


def load_profile(path) -> dict[str, tuple[int, int]]:
    """Read ``[{object_tag, expected_reads, expected_writes}, ...]`` into a tag map."""
    entries = json.loads(Path(path).read_text())
    return {e["object_tag"]: (int(e.get("expected_reads", 0)), int(e.get("expected_writes", 0)))
            for e in entries}
