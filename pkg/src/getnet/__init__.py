"""Stability-aware benchmarking of attention CNNs for underwater acoustic detection."""

__version__ = "0.1.0"
