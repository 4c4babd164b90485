"""Passive memory node: region state, wire protocol and TCP service."""
from .region import RegionState
from .server import MemoryNode, execute, serve

__all__ = ["MemoryNode", "RegionState", "execute", "serve"]
