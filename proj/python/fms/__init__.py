"""Forecasting model search: weight-aware multifidelity HPO over model hubs."""

from ._core import (
    BenchmarkError,
    BenchmarkTable,
    HubSpec,
    Trace,
    expected_improvement,
    generate_hub,
    kendall_tau,
    methods,
    run,
)

__all__ = [
    "BenchmarkError",
    "BenchmarkTable",
    "HubSpec",
    "Trace",
    "expected_improvement",
    "generate_hub",
    "kendall_tau",
    "methods",
    "run",
]
