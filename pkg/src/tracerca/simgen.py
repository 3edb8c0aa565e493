"""Synthetic trace and incident generator with ground-truth root causes.

Builds a random rooted call tree, samples per-trace spans with log-normal
exclusive latencies, and inflates the exclusive latency of the chosen root
causes during the alert window. Inclusive latencies of ancestors rise
purely through span nesting, so the injected components are the only
mechanical cause of the frontend shift.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from tracerca.core import IncidentCase, SpanRecord, Window, WindowPair
from tracerca.ingest import DEFAULT_BUCKET_MS, TraceGroup, aggregate


@dataclass(frozen=True)
class GenConfig:
    n_components: int = 500
    parent_window: Optional[int] = None  # attach node i to one of the last k nodes; None = any
    invocation_prob: float = 0.97
    latency_median_range_ms: tuple[float, float] = (5.0, 150.0)
    latency_sigma_range: tuple[float, float] = (0.3, 0.8)
    n_root_causes: int = 3
    surge_magnitude: float = 5.0
    # root causes are drawn among components whose propagated surge exceeds
    # this multiple of the frontend's bucket-mean noise, so the incident is
    # actually visible end-to-end (real alerts fire on the frontend SLA)
    min_cause_visibility: float = 2.0
    base_buckets: int = 18
    alert_buckets: int = 10
    traces_per_bucket: int = 40
    bucket_ms: int = DEFAULT_BUCKET_MS
    start_ms: int = 0
    gap_buckets: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_components < 2:
            raise ValueError("need at least a frontend and one callee")
        if not (0.0 < self.invocation_prob <= 1.0):
            raise ValueError("invocation_prob must be in (0, 1]")
        if self.n_root_causes < 0 or self.n_root_causes > self.n_components - 1:
            raise ValueError("n_root_causes must fit among non-frontend components")
        if self.surge_magnitude < 0:
            raise ValueError("surge_magnitude must be >= 0")
        if self.base_buckets < 1 or self.alert_buckets < 1 or self.traces_per_bucket < 1:
            raise ValueError("window lengths and traces_per_bucket must be positive")

    def windows(self) -> WindowPair:
        base_end = self.start_ms + self.base_buckets * self.bucket_ms
        alert_start = base_end + self.gap_buckets * self.bucket_ms
        alert_end = alert_start + self.alert_buckets * self.bucket_ms
        return WindowPair(base=(self.start_ms, base_end), alert=(alert_start, alert_end))


@dataclass(frozen=True)
class Topology:
    """Ground-truth call tree: component ids, parent index per node, latency params."""

    ids: tuple[str, ...]
    parent: tuple[int, ...]  # parent[0] == -1 for the frontend
    children: tuple[tuple[int, ...], ...]
    log_mu: np.ndarray
    log_sigma: np.ndarray
    root_causes: frozenset[str]

    def exl_std(self, i: int) -> float:
        """Standard deviation of node i's base exclusive-latency distribution."""
        s2 = float(self.log_sigma[i]) ** 2
        return math.sqrt((math.exp(s2) - 1.0) * math.exp(2.0 * float(self.log_mu[i]) + s2))


@dataclass
class GeneratedCase:
    case: IncidentCase
    topology: Topology
    n_traces: int
    n_spans: int
    spans_path: Optional[Path] = None


def build_topology(cfg: GenConfig, rng: np.random.Generator) -> Topology:
    n = cfg.n_components
    ids = tuple(f"svc-{i:04d}" for i in range(n))
    parent = [-1]
    kids: list[list[int]] = [[] for _ in range(n)]
    for i in range(1, n):
        lo = 0 if cfg.parent_window is None else max(0, i - cfg.parent_window)
        p = int(rng.integers(lo, i))
        parent.append(p)
        kids[p].append(i)
    med_lo, med_hi = cfg.latency_median_range_ms
    log_mu = np.log(rng.uniform(med_lo, med_hi, size=n))
    log_sigma = rng.uniform(*cfg.latency_sigma_range, size=n)

    # invocation probability of each node within one trace
    path_prob = np.ones(n)
    for i in range(1, n):
        path_prob[i] = path_prob[parent[i]] * cfg.invocation_prob
    s2 = log_sigma**2
    mean = np.exp(log_mu + s2 / 2)
    var = (np.exp(s2) - 1.0) * np.exp(2 * log_mu + s2)
    # frontend bucket-mean noise: per-trace variance of the total, averaged
    # over a bucket (Bernoulli invocation adds the p(1-p)*mean^2 term)
    front_sigma = math.sqrt(
        float(np.sum(path_prob * var + path_prob * (1 - path_prob) * mean**2))
        / cfg.traces_per_bucket
    )
    effect = path_prob * cfg.surge_magnitude * np.sqrt(var)
    if cfg.surge_magnitude > 0:
        eligible = [
            i for i in range(1, n) if effect[i] >= cfg.min_cause_visibility * front_sigma
        ]
        if len(eligible) < cfg.n_root_causes:
            raise ValueError(
                f"only {len(eligible)} components can produce a frontend-visible "
                f"surge; lower min_cause_visibility or raise surge_magnitude"
            )
        cause_idx = rng.choice(np.asarray(eligible), size=cfg.n_root_causes, replace=False)
    else:
        cause_idx = rng.choice(np.arange(1, n), size=cfg.n_root_causes, replace=False)
    causes = frozenset(ids[int(i)] for i in sorted(cause_idx))
    return Topology(
        ids=ids,
        parent=tuple(parent),
        children=tuple(tuple(k) for k in kids),
        log_mu=log_mu,
        log_sigma=log_sigma,
        root_causes=causes,
    )


def _sample_trace(
    topo: Topology,
    cfg: GenConfig,
    rng: np.random.Generator,
    trace_id: str,
    t0: int,
    surge: bool,
) -> list[SpanRecord]:
    n = len(topo.ids)
    invoked = np.zeros(n, dtype=bool)
    invoked[0] = True
    for i in range(1, n):
        if invoked[topo.parent[i]] and rng.random() < cfg.invocation_prob:
            invoked[i] = True
    idx = np.flatnonzero(invoked)
    exl = np.exp(rng.normal(topo.log_mu[idx], topo.log_sigma[idx]))
    exl_ms = {}
    for j, i in enumerate(idx):
        value = exl[j]
        if surge and topo.ids[i] in topo.root_causes:
            value += cfg.surge_magnitude * topo.exl_std(int(i))
        exl_ms[int(i)] = max(0, int(round(value)))

    # Inclusive durations bottom-up (children are sequential, no overlap),
    # then entry times top-down: own work first, then each child in order.
    inclusive: dict[int, int] = {}
    for i in sorted(exl_ms, reverse=True):
        inclusive[i] = exl_ms[i] + sum(
            inclusive[c] for c in topo.children[i] if c in exl_ms
        )
    entry: dict[int, int] = {0: t0}
    spans: list[SpanRecord] = []
    for i in sorted(exl_ms):
        e = entry[i]
        cursor = e + exl_ms[i]
        for c in topo.children[i]:
            if c in exl_ms:
                entry[c] = cursor
                cursor += inclusive[c]
        spans.append(
            SpanRecord(
                trace_id=trace_id,
                component_id=topo.ids[i],
                parent_component_id=None if i == 0 else topo.ids[topo.parent[i]],
                entry_ms=e,
                exit_ms=e + inclusive[i],
            )
        )
    return spans


def iter_traces(cfg: GenConfig, topo: Topology, rng: np.random.Generator) -> Iterator[TraceGroup]:
    windows = cfg.windows()
    for window, (start, _end), n_buckets in (
        (Window.BASE, windows.base, cfg.base_buckets),
        (Window.ALERT, windows.alert, cfg.alert_buckets),
    ):
        surge = window is Window.ALERT and cfg.surge_magnitude > 0
        for b in range(n_buckets):
            for t in range(cfg.traces_per_bucket):
                # entry strictly inside the bucket so every span lands in it
                offset = int(rng.integers(0, cfg.bucket_ms // 2))
                t0 = start + b * cfg.bucket_ms + offset
                trace_id = f"{window.value}-{b:04d}-{t:04d}"
                yield trace_id, _sample_trace(topo, cfg, rng, trace_id, t0, surge)


def span_to_jsonl(span: SpanRecord) -> str:
    return json.dumps(
        {
            "trace_id": span.trace_id,
            "component": span.component_id,
            "parent": span.parent_component_id,
            "entry_ms": span.entry_ms,
            "exit_ms": span.exit_ms,
        }
    )


def generate_case(
    cfg: GenConfig,
    spans_path: Optional[Union[str, Path]] = None,
    case_id: str = "case",
) -> GeneratedCase:
    """Build one labelled incident; optionally stream the raw spans to jsonl.

    Deterministic under cfg.seed: same config, same bytes.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    topo = build_topology(cfg, rng)
    counters = {"traces": 0, "spans": 0}
    sink = Path(spans_path).open("w") if spans_path is not None else None

    def counted() -> Iterator[TraceGroup]:
        try:
            for trace_id, spans in iter_traces(cfg, topo, rng):
                counters["traces"] += 1
                counters["spans"] += len(spans)
                if sink is not None:
                    for s in spans:
                        sink.write(span_to_jsonl(s) + "\n")
                yield trace_id, spans
        finally:
            if sink is not None:
                sink.close()

    graph = aggregate(counted(), cfg.windows(), bucket_ms=cfg.bucket_ms)
    case = IncidentCase(
        graph=graph,
        windows=cfg.windows(),
        true_root_causes=topo.root_causes if cfg.surge_magnitude > 0 else frozenset(),
        case_id=case_id,
    )
    return GeneratedCase(
        case=case,
        topology=topo,
        n_traces=counters["traces"],
        n_spans=counters["spans"],
        spans_path=Path(spans_path) if spans_path is not None else None,
    )


def generate_suite(
    cfg: GenConfig, n_cases: int, out_dir: Optional[Union[str, Path]] = None
) -> list[GeneratedCase]:
    """Independent cases under seeds cfg.seed, cfg.seed+1, ..."""
    out = []
    for k in range(n_cases):
        case_cfg = replace(cfg, seed=cfg.seed + k)
        case_id = f"case-{case_cfg.seed:04d}"
        path = None
        if out_dir is not None:
            path = Path(out_dir) / f"{case_id}.spans.jsonl"
        out.append(generate_case(case_cfg, spans_path=path, case_id=case_id))
    return out
