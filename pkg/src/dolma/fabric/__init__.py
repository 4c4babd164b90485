"""One-sided remote memory operations over a simulated or TCP-backed fabric."""
from .base import Fabric
from .clock import VirtualClock, WallClock
from .latency import GiB, KiB, LatencyModel, MiB
from .sim import SimFabric
from .tcp import TcpFabric
from .types import Completion, FabricOp, OpKind, Pattern, RemoteAddr, Status


def estimate_latency(kind: OpKind, pattern: Pattern, size: int, model: LatencyModel | None = None) -> float:
    """Modelled end-to-end latency in microseconds (default InfiniBand profile)."""
    return (model or LatencyModel.infiniband()).estimate(kind, pattern, size)


__all__ = [
    "Completion", "Fabric", "FabricOp", "GiB", "KiB", "LatencyModel", "MiB", "OpKind", "Pattern",
    "RemoteAddr", "SimFabric", "Status", "TcpFabric", "VirtualClock", "WallClock", "estimate_latency",
]
