"""Multi-rate activity recognition with expert fusion and a fixed-geometry head."""

__version__ = "0.1.0"
