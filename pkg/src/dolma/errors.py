"""Exception types shared across the runtime, fabric and memory node.

Every fabric-level failure carries a symbolic ``code`` so the simulated and
TCP backends can be compared error-for-error.
"""


class DolmaError(Exception):
    """Base class for all errors raised by this package."""


class FabricError(DolmaError):
    code = "FABRIC_ERROR"

    def __init__(self, message="", *, object_id=None):
        super().__init__(message or self.code)
        self.object_id = object_id


class OutOfBounds(FabricError):
    code = "OUT_OF_BOUNDS"


class Oversized(FabricError):
    code = "OVERSIZED"


class RemoteOOM(FabricError):
    code = "REMOTE_OOM"


class DoubleFree(FabricError):
    code = "DOUBLE_FREE"


class Misaligned(FabricError):
    code = "MISALIGNED"


class RemoteError(FabricError):
    """A remote operation completed with a non-OK status."""

    code = "REMOTE_ERROR"


class LockTimeout(DolmaError):
    code = "LOCK_TIMEOUT"


class ConfigError(DolmaError, ValueError):
    code = "CONFIG_ERROR"


class OutOfRange(DolmaError, IndexError):
    code = "OUT_OF_RANGE"


class CapacityError(DolmaError):
    """Local memory usage would exceed the configured budget."""

    code = "CAPACITY"


class TicketError(DolmaError):
    """A fetch ticket was misused (acquired twice, or read before acquire)."""

    code = "TICKET"


class LockError(DolmaError):
    code = "LOCK"


class CheckpointError(DolmaError):
    code = "CHECKPOINT"


# wire status numbers <-> exception classes; 0 is OK
WIRE_ERRORS = {
    1: OutOfBounds,
    2: Oversized,
    3: RemoteOOM,
    4: DoubleFree,
    5: Misaligned,
    6: RemoteError,  # I/O failure on the memory node (snapshot)
    7: RemoteError,  # malformed request
}
WIRE_CODES = {cls: num for num, cls in list(WIRE_ERRORS.items())[:5]}

ERRORS_BY_CODE = {cls.code: cls for cls in (OutOfBounds, Oversized, RemoteOOM, DoubleFree, Misaligned, RemoteError)}
