"""Interlocking backpropagation: gradient-routing strategies for component-partitioned networks."""

__version__ = "0.1.0"
