"""Per-component anomaly and latency indicators that pruning actions threshold on.

Computed once on the full graph; filtering trees route components by
comparing these values (or their percentile ranks across components)
against fixed thresholds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from tracerca.core import ComponentStats, DependencyGraph, Window

SIGMA_FLOOR_MS = 1e-6

# Metric names double as keys in the percentile-rank map.
METRIC_NAMES = (
    "avg_exl",
    "max_exl",
    "avg_inl",
    "normalize_count",
    "overhead",
    "anomaly_rank_score",
    "root_target_corr",
)


class InsufficientDataError(ValueError):
    """Not enough non-missing buckets to compute an indicator."""


@dataclass(frozen=True)
class IndicatorVector:
    """All indicator values for one component; None marks not-computable.

    ``percentile_rank[m]`` is the fraction of components (among those with
    a value for metric m) whose value is strictly smaller; ties share the
    lower rank.
    """

    component_id: str
    avg_exl: Optional[float] = None
    max_exl: Optional[float] = None
    avg_inl: Optional[float] = None
    normalize_count: Optional[float] = None
    overhead: Optional[float] = None
    anomaly_rank_score: Optional[float] = None
    root_target_corr: Optional[float] = None
    percentile_rank: dict[str, float] = field(default_factory=dict)

    def value(self, metric: str) -> Optional[float]:
        if metric not in METRIC_NAMES:
            raise KeyError(metric)
        return getattr(self, metric)


def normalize_count(stats: ComponentStats, total_traces_alert: int) -> float:
    """Alert-window occurrence count over total alert traces, clipped to [0, 1]."""
    if total_traces_alert <= 0:
        raise ValueError(f"total_traces_alert must be positive, got {total_traces_alert}")
    return min(1.0, max(0.0, stats.occurrences.alert / total_traces_alert))


def overhead(stats: ComponentStats) -> float:
    """Total inclusive-latency increment of the alert window over the base window.

    The base sum is rescaled by the ratio of non-missing bucket counts so
    windows of unequal length compare fairly; equals n_alert * (mean
    difference).
    """
    base = stats.inl.base.present_values()
    alert = stats.inl.alert.present_values()
    if base.size == 0 or alert.size == 0:
        raise InsufficientDataError(
            f"component {stats.component_id!r}: a window has no inclusive-latency data"
        )
    return float(alert.sum() - base.sum() * (alert.size / base.size))


def anomaly_rank_score(stats: ComponentStats, k: float = 3.0) -> float:
    """Persistence-times-magnitude anomaly score over the alert window.

    z-scores the alert buckets against the base window's mean and standard
    deviation (sigma floored to avoid division by zero), then multiplies
    the fraction of alert buckets beyond k sigma by the largest z-score
    (floored at 0). Zero whenever every alert bucket stays within k sigma.
    """
    base = stats.inl.base.present_values()
    alert = stats.inl.alert.present_values()
    if base.size < 2:
        raise InsufficientDataError(
            f"component {stats.component_id!r}: need >= 2 base buckets to estimate sigma"
        )
    if alert.size == 0:
        raise InsufficientDataError(
            f"component {stats.component_id!r}: alert window has no inclusive-latency data"
        )
    mu = float(base.mean())
    sigma = max(float(base.std(ddof=0)), SIGMA_FLOOR_MS)
    z = (alert - mu) / sigma
    exceed_fraction = float(np.mean(z > k))
    return exceed_fraction * max(float(z.max()), 0.0)


def root_target_correlation(graph: DependencyGraph, cid: str) -> Optional[float]:
    """Pearson correlation between a component's InL and the frontend's InL.

    Aligned bucket-wise over base and alert windows concatenated; None if
    fewer than 3 overlapping buckets or if either aligned series is
    constant.
    """
    if cid not in graph:
        raise KeyError(cid)
    target = graph.components[cid]
    front = graph.components[graph.frontend_id]
    xs: list[float] = []
    ys: list[float] = []
    for window in (Window.BASE, Window.ALERT):
        t = target.inl.get(window).as_array()
        f = front.inl.get(window).as_array()
        n = min(t.size, f.size)
        both = ~(np.isnan(t[:n]) | np.isnan(f[:n]))
        xs.extend(t[:n][both].tolist())
        ys.extend(f[:n][both].tolist())
    if len(xs) < 3:
        return None
    x = np.asarray(xs)
    y = np.asarray(ys)
    sx = float(x.std(ddof=0))
    sy = float(y.std(ddof=0))
    if sx == 0.0 or sy == 0.0:
        return None
    r = float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))
    return max(-1.0, min(1.0, r))


def _alert_mean(series) -> Optional[float]:
    vals = series.present_values()
    return float(vals.mean()) if vals.size else None


def _alert_max(series) -> Optional[float]:
    vals = series.present_values()
    return float(vals.max()) if vals.size else None


def compute_indicators(graph: DependencyGraph) -> dict[str, IndicatorVector]:
    """All indicators plus cross-component percentile ranks, per component.

    Per-component indicators that cannot be computed (insufficient data)
    are left as None; the component keeps its vector either way. The total
    alert trace count is the frontend's occurrence count, since every
    trace contains the root.
    """
    total_alert = graph.components[graph.frontend_id].occurrences.alert
    raw: dict[str, dict[str, Optional[float]]] = {}
    for cid in graph.component_ids:
        stats = graph.components[cid]
        entry: dict[str, Optional[float]] = {
            "avg_exl": _alert_mean(stats.exl.alert),
            "max_exl": _alert_max(stats.exl.alert),
            "avg_inl": _alert_mean(stats.inl.alert),
        }
        try:
            entry["normalize_count"] = normalize_count(stats, total_alert)
        except ValueError:
            entry["normalize_count"] = None
        try:
            entry["overhead"] = overhead(stats)
        except InsufficientDataError:
            entry["overhead"] = None
        try:
            entry["anomaly_rank_score"] = anomaly_rank_score(stats)
        except InsufficientDataError:
            entry["anomaly_rank_score"] = None
        entry["root_target_corr"] = root_target_correlation(graph, cid)
        raw[cid] = entry

    ranks: dict[str, dict[str, float]] = {cid: {} for cid in raw}
    for metric in METRIC_NAMES:
        valued = [(cid, vals[metric]) for cid, vals in raw.items() if vals[metric] is not None]
        if not valued:
            continue
        values = np.asarray([v for _, v in valued])
        for cid, v in valued:
            ranks[cid][metric] = float(np.sum(values < v)) / len(valued)

    return {
        cid: IndicatorVector(component_id=cid, percentile_rank=ranks[cid], **raw[cid])
        for cid in graph.component_ids
    }


def indicators_to_json(inds: dict[str, IndicatorVector]) -> dict:
    """JSON-friendly dump, components sorted by id."""

    def clean(x: Optional[float]) -> Optional[float]:
        if x is None or (isinstance(x, float) and math.isnan(x)):
            return None
        return x

    out = {}
    for cid in sorted(inds):
        iv = inds[cid]
        out[cid] = {
            **{m: clean(iv.value(m)) for m in METRIC_NAMES},
            "percentile_rank": {m: iv.percentile_rank[m] for m in sorted(iv.percentile_rank)},
        }
    return out
