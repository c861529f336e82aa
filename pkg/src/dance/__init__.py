"""Gated supernet search over per-layer feature-dimension masks."""

__version__ = "0.1.0"
