"""Group-sparse 4-bit weight compression with a sparse GEMV engine."""

__version__ = "0.1.0"
