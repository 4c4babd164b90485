"""Synthetic iterative workloads and the built-in presets."""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from ..errors import ConfigError

KiB = 1 << 10
MiB = 1 << 20

# Modelled compute per MiB touched by the kernel, in microseconds. Roughly
# four times the cost of streaming the same MiB through local DRAM.
COMPUTE_US_PER_MIB = 1000.0
DEFAULT_BLOCK = 1 * MiB


class AccessPattern(enum.Enum):
    SEQ_STRIDE = "SEQ_STRIDE"
    RANDOM = "RANDOM"
    CHAINED_DEPENDENT = "CHAINED_DEPENDENT"


@dataclass
class Population:
    """``count`` objects of about ``size_bytes`` each.

    Long-lived objects exist for the whole run and are streamed by the kernel
    every iteration. Short-lived ones are allocated, touched once and freed
    within a single iteration.
    """

    count: int
    size_bytes: int
    lifetime: str = "long"
    tag: Optional[str] = None
    size_jitter: float = 0.0
    streamed: bool = True

    def __post_init__(self):
        if self.count < 0 or self.size_bytes < 1:
            raise ConfigError("population needs count >= 0 and size_bytes >= 1")
        if self.lifetime not in ("long", "short"):
            raise ConfigError(f"unknown lifetime class {self.lifetime!r}")
        if not 0 <= self.size_jitter < 1:
            raise ConfigError("size_jitter must be in [0, 1)")


@dataclass
class WorkloadSpec:
    name: str
    populations: list[Population]
    read_write: tuple[int, int] = (1, 1)
    pattern: AccessPattern = AccessPattern.SEQ_STRIDE
    iterations: int = 6
    compute_us: Optional[float] = None     # per iteration at one thread; derived from volume if None
    threads: int = 1
    stride: int = 1
    block_bytes: int = DEFAULT_BLOCK
    scalable: bool = True
    seed: int = 0x5EED

    def __post_init__(self):
        if isinstance(self.pattern, str):
            self.pattern = AccessPattern(self.pattern)
        self.read_write = tuple(self.read_write)
        self.populations = [p if isinstance(p, Population) else Population(**p) for p in self.populations]
        if len(self.read_write) != 2 or min(self.read_write) <= 0:
            raise ConfigError("read:write ratio components must be positive")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.threads < 1 or self.stride < 1 or self.block_bytes < 8:
            raise ConfigError("threads and stride must be >= 1, block_bytes >= 8")

    @property
    def write_fraction(self) -> float:
        r, w = self.read_write
        return min(1.0, w / r)

    @property
    def streamed_bytes(self) -> int:
        return sum(p.count * p.size_bytes for p in self.populations if p.lifetime == "long" and p.streamed)

    @property
    def total_bytes(self) -> int:
        return sum(p.count * p.size_bytes for p in self.populations)

    def iteration_compute_us(self) -> float:
        if self.compute_us is not None:
            return self.compute_us
        return COMPUTE_US_PER_MIB * self.streamed_bytes / MiB

    def scaled(self, factor: float) -> "WorkloadSpec":
        """Same workload with every object ``factor`` times larger (compute scales along)."""
        pops = [replace(p, size_bytes=max(8, int(p.size_bytes * factor))) for p in self.populations]
        compute = None if self.compute_us is None else self.compute_us * factor
        return replace(self, populations=pops, compute_us=compute, name=f"{self.name}x{factor:g}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pattern"] = self.pattern.value
        d["read_write"] = list(self.read_write)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadSpec":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad workload spec: {exc}") from None


# name: (total GB, remote GB, read:write, objects going remote, pattern, stride)
_TABLE = {
    "cg": (8.6, 5.4, (1, 1), ["a"], AccessPattern.SEQ_STRIDE, 2),
    "mg": (26.5, 26.4, (9, 8), ["u", "v", "r"], AccessPattern.SEQ_STRIDE, 2),
    "ft": (80.0, 80.0, (11, 7), ["twiddle", "u_0", "u_1"], AccessPattern.RANDOM, 1),
    "bt": (10.7, 7.6, (5, 3), ["u", "forcing", "rhs"], AccessPattern.SEQ_STRIDE, 3),
    "lu": (8.8, 7.6, (15, 8), ["u", "rsd", "frct"], AccessPattern.RANDOM, 1),
    "is": (32.3, 32.0, (1, 1), ["key_array", "key_buf2"], AccessPattern.SEQ_STRIDE, 1),
    "xsbench": (5.5, 5.1, (1, 1), ["index_grid"], AccessPattern.RANDOM, 1),
    "miniamr": (32.2, 30.9, (11, 9), ["blocks"], AccessPattern.CHAINED_DEPENDENT, 1),
}
PRESETS = tuple(_TABLE)
DESK_MIB_PER_GB = 1.0       # 80 GB of FT becomes 80 MiB


def preset(name: str, scale: float = DESK_MIB_PER_GB, **overrides) -> WorkloadSpec:
    """Table-derived preset: named large arrays plus a working set of smaller ones."""
    try:
        total_gb, remote_gb, ratio, names, pattern, stride = _TABLE[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    big = int(remote_gb * scale * MiB / len(names)) // 8 * 8
    pops = [Population(1, big, tag=n) for n in names]
    rest = int((total_gb - remote_gb) * scale * MiB)
    if rest >= 64 * KiB:
        pops.append(Population(4, rest // 4 // 8 * 8, tag="aux"))
    pops.append(Population(64, 2 * KiB, tag="scalars", streamed=False))
    spec = WorkloadSpec(name, pops, ratio, pattern, stride=stride)
    return replace(spec, **overrides) if overrides else spec


def laghos_like(tiny: int = 100_000, large: int = 200, large_bytes: int = 1 * MiB,
                tiny_bytes: int = 48, iterations: int = 5) -> WorkloadSpec:
    """Many tiny short-lived objects next to a few hundred large long-lived ones."""
    return WorkloadSpec("laghos", [
        Population(large, large_bytes, tag="field"),
        Population(tiny, tiny_bytes, lifetime="short", tag="temp", size_jitter=0.5, streamed=False),
    ], (1, 1), AccessPattern.SEQ_STRIDE, iterations=iterations)


def load_spec(ref: str) -> WorkloadSpec:
    """A preset name or a JSON file holding a WorkloadSpec."""
    if ref in _TABLE:
        return preset(ref)
    path = Path(ref)
    if not path.exists():
        raise ConfigError(f"{ref!r} is neither a preset ({', '.join(PRESETS)}) nor a spec file")
    return WorkloadSpec.from_dict(json.loads(path.read_text()))
