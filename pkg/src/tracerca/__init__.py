"""Root-cause analysis for microservice traces.

Pipeline: ingest raw span data into a dependency graph with per-window
latency series, prune redundant components with a learned filtering tree,
then attribute the frontend latency shift to the surviving components via
causal mechanism replacement and Shapley values.
"""

from tracerca.core import (
    ComponentStats,
    DependencyGraph,
    IncidentCase,
    LatencyPair,
    PerWindow,
    SpanRecord,
    TimeSeries,
    Window,
    WindowPair,
    descendants,
    span_latencies,
)

__all__ = [
    "ComponentStats",
    "DependencyGraph",
    "IncidentCase",
    "LatencyPair",
    "PerWindow",
    "SpanRecord",
    "TimeSeries",
    "Window",
    "WindowPair",
    "descendants",
    "span_latencies",
]

__version__ = "0.1.0"
