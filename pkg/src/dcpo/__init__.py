"""Dynamic clipping policy optimization kernels and a tabular RLVR simulator."""

__version__ = "0.1.0"
