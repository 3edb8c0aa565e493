import math

import numpy as np
import pytest

from tracerca.core import (
    ComponentStats,
    DependencyGraph,
    IncidentCase,
    PerWindow,
    TimeSeries,
    WindowPair,
)

BUCKET = 60_000


def series(values, start=0, bucket=BUCKET, counts=None):
    """TimeSeries from a plain list; None entries become missing buckets."""
    vals = tuple(float("nan") if v is None else float(v) for v in values)
    if counts is None:
        counts = tuple(0 if (v is None or (isinstance(v, float) and math.isnan(v))) else 1 for v in values)
    return TimeSeries(bucket_ms=bucket, start_ms=start, values=vals, counts=tuple(counts))


def windows(n_base=4, n_alert=4, bucket=BUCKET):
    return WindowPair(
        base=(0, n_base * bucket),
        alert=(n_base * bucket, (n_base + n_alert) * bucket),
    )


def stats(
    cid,
    inl_base,
    inl_alert,
    exl_base=None,
    exl_alert=None,
    occ_base=None,
    occ_alert=None,
    bucket=BUCKET,
):
    n_base = len(inl_base)
    exl_base = exl_base if exl_base is not None else inl_base
    exl_alert = exl_alert if exl_alert is not None else inl_alert
    return ComponentStats(
        component_id=cid,
        inl=PerWindow(
            series(inl_base, 0, bucket),
            series(inl_alert, n_base * bucket, bucket),
        ),
        exl=PerWindow(
            series(exl_base, 0, bucket),
            series(exl_alert, n_base * bucket, bucket),
        ),
        occurrences=PerWindow(
            occ_base if occ_base is not None else len(inl_base),
            occ_alert if occ_alert is not None else len(inl_alert),
        ),
    )


def graph_from(edge_list, stats_by_id, frontend):
    return DependencyGraph(
        components=list(stats_by_id.values()), edges=edge_list, frontend_id=frontend
    )


@pytest.fixture
def running_example_graph():
    """frontend -> A, frontend -> B, B -> C, C -> F, B -> E, E -> F."""
    flat = [10.0, 10.0, 10.0, 10.0]
    comps = {cid: stats(cid, flat, flat) for cid in ["frontend", "A", "B", "C", "E", "F"]}
    edges = [
        ("frontend", "A"),
        ("frontend", "B"),
        ("B", "C"),
        ("C", "F"),
        ("B", "E"),
        ("E", "F"),
    ]
    return graph_from(edges, comps, "frontend")


@pytest.fixture(scope="session")
def small_incident():
    """60-component case with one 5-sigma root cause; reused across tests."""
    from tracerca.simgen import GenConfig, generate_case

    cfg = GenConfig(
        n_components=60,
        traces_per_bucket=20,
        base_buckets=10,
        alert_buckets=8,
        n_root_causes=1,
        seed=3,
    )
    return generate_case(cfg)


def make_case(graph, window_pair, truth=(), case_id="case"):
    return IncidentCase(
        graph=graph,
        windows=window_pair,
        true_root_causes=frozenset(truth),
        case_id=case_id,
    )
