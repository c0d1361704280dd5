"""Power-of-two weight-matrix decomposition and shift-add systolic-array exploration."""

__version__ = "0.1.0"
