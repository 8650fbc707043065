"""Streaming test-time adaptation with singular-value penalization and
semantic feature augmentation, plus a synthetic corruption benchmark."""

from ._kernels import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
