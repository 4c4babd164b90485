"""Object-level disaggregated memory runtime with a simulated and a TCP fabric."""

__version__ = "0.1.0"
