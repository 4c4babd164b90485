from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional


class OpKind(enum.Enum):
    READ = "READ"
    WRITE = "WRITE"
    ATOMIC_CAS = "ATOMIC_CAS"
    ATOMIC_FADD = "ATOMIC_FADD"

    @property
    def is_atomic(self) -> bool:
        return self in (OpKind.ATOMIC_CAS, OpKind.ATOMIC_FADD)


class Pattern(enum.Enum):
    SEQ = "SEQ"
    RAND = "RAND"


class Status(enum.Enum):
    OK = "OK"
    REMOTE_ERROR = "REMOTE_ERROR"
    TRUNCATED = "TRUNCATED"


@dataclass(frozen=True)
class RemoteAddr:
    node_id: int
    offset: int

    def __add__(self, delta: int) -> "RemoteAddr":
        return RemoteAddr(self.node_id, self.offset + delta)


@dataclass
class FabricOp:
    """One-sided work request.

    ``local`` is the caller-owned buffer: the source for WRITE, the
    destination for READ. Atomics carry their operands in ``compare``/``value``
    and deliver the previous word in the completion.
    """

    kind: OpKind
    remote: RemoteAddr
    length: int
    local: Optional[memoryview] = None
    signaled: bool = True
    pattern: Pattern = Pattern.SEQ
    compare: int = 0
    value: int = 0
    op_id: int = -1

    @classmethod
    def read(cls, remote, dest, pattern=Pattern.SEQ, signaled=True):
        dest = memoryview(dest).cast("B")
        return cls(OpKind.READ, remote, len(dest), dest, signaled, pattern)

    @classmethod
    def write(cls, remote, src, pattern=Pattern.SEQ, signaled=True):
        src = memoryview(src).cast("B")
        return cls(OpKind.WRITE, remote, len(src), src, signaled, pattern)

    @classmethod
    def cas(cls, remote, expected, desired):
        return cls(OpKind.ATOMIC_CAS, remote, 8, compare=expected, value=desired)

    @classmethod
    def fadd(cls, remote, addend):
        return cls(OpKind.ATOMIC_FADD, remote, 8, value=addend)


@dataclass
class Completion:
    op_id: int
    status: Status
    completed_at: float
    # previous word for atomics
    value: Optional[int] = None
    error: Optional[str] = field(default=None, compare=False)
    channel: int = field(default=0, compare=False)

    @property
    def ok(self) -> bool:
        return self.status is Status.OK
