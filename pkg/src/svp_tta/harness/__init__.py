"""Benchmark generation, dataset serialization, metrics, diagnostics, reports,
and the command-line interface."""

from . import benchmark, dataio, metrics, report

__all__ = ["benchmark", "dataio", "metrics", "report"]
