"""Load raw span files, sample traces, and aggregate into a dependency graph.

On-disk span format is jsonl, one span per line:
    {"trace_id": str, "component": str, "parent": str|null,
     "entry_ms": int, "exit_ms": int}

Aggregation buckets spans by entry time (15-minute buckets by default),
averages per-trace latency contributions per component and bucket, and
unions observed caller->callee pairs into the edge set.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

from tracerca.core import (
    ComponentStats,
    DependencyGraph,
    IncidentCase,
    PerWindow,
    SpanRecord,
    TimeSeries,
    TraceStructureError,
    Window,
    WindowPair,
    per_span_latencies,
    span_latencies,
)

DEFAULT_BUCKET_MS = 15 * 60 * 1000

TraceGroup = tuple[str, list[SpanRecord]]


class IngestError(ValueError):
    """Unreadable or malformed input file."""


class EmptyWindowError(ValueError):
    """A window contains no traces."""


class AmbiguousFrontendError(ValueError):
    """Traces disagree on the root component."""


@dataclass
class LoadResult:
    """Grouped spans of valid traces plus a record of what was skipped."""

    groups: list[TraceGroup]
    skipped: int = 0
    warnings: list[str] = field(default_factory=list)

    def __iter__(self) -> Iterator[TraceGroup]:
        return iter(self.groups)

    def __len__(self) -> int:
        return len(self.groups)


_REQUIRED_KEYS = ("trace_id", "component", "parent", "entry_ms", "exit_ms")


def _parse_span(obj: dict, line_no: int) -> SpanRecord:
    for key in _REQUIRED_KEYS:
        if key not in obj:
            raise IngestError(f"line {line_no}: missing key {key!r}")
    try:
        return SpanRecord(
            trace_id=str(obj["trace_id"]),
            component_id=str(obj["component"]),
            parent_component_id=None if obj["parent"] is None else str(obj["parent"]),
            entry_ms=int(obj["entry_ms"]),
            exit_ms=int(obj["exit_ms"]),
        )
    except (TypeError, ValueError, TraceStructureError) as exc:
        raise IngestError(f"line {line_no}: {exc}") from exc


def load_traces(path: Union[str, Path]) -> LoadResult:
    """Read a span jsonl file and group spans into validated traces.

    Unparseable lines raise :class:`IngestError` with the line number.
    Traces whose spans do not form a valid tree are skipped and counted,
    with one warning each.
    """
    path = Path(path)
    if not path.exists():
        raise IngestError(f"no such file: {path}")
    by_trace: dict[str, list[SpanRecord]] = {}
    with path.open() as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"line {line_no}: invalid json: {exc}") from exc
            span = _parse_span(obj, line_no)
            by_trace.setdefault(span.trace_id, []).append(span)

    result = LoadResult(groups=[])
    for trace_id, spans in by_trace.items():
        try:
            span_latencies(spans)
        except TraceStructureError as exc:
            result.skipped += 1
            result.warnings.append(f"skipped trace {trace_id!r}: {exc}")
            continue
        result.groups.append((trace_id, spans))
    return result


def _keep_fraction(trace_id: str, seed: int) -> float:
    digest = hashlib.blake2b(
        f"{seed}:{trace_id}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big") / 2**64


def sample_traces(
    groups: Iterable[TraceGroup], rate: float, seed: int
) -> list[TraceGroup]:
    """Keep each trace independently with probability ``rate``.

    Deterministic under ``seed`` and independent of input order: the keep
    decision hashes (seed, trace_id). Sampling is at trace level; spans of
    a kept trace are never dropped.
    """
    if not (0.0 < rate <= 1.0):
        raise ValueError(f"rate must be in (0, 1], got {rate}")
    if rate == 1.0:
        return list(groups)
    return [g for g in groups if _keep_fraction(g[0], seed) < rate]


@dataclass
class _Accumulator:
    sum_inl: float = 0.0
    sum_exl: float = 0.0
    n: int = 0


def aggregate(
    groups: Iterable[TraceGroup],
    windows: WindowPair,
    bucket_ms: int = DEFAULT_BUCKET_MS,
) -> DependencyGraph:
    """Aggregate sampled traces into a dependency graph with per-window series.

    A span belongs to the bucket containing its entry time; spans outside
    both windows are ignored. Bucket values are means of per-trace latency
    contributions over the traces invoking the component in that bucket.
    Buckets nobody hit stay missing rather than zero-filled.
    """
    if bucket_ms <= 0:
        raise ValueError(f"bucket_ms must be positive, got {bucket_ms}")
    n_buckets = {
        Window.BASE: max(1, math.ceil((windows.base[1] - windows.base[0]) / bucket_ms)),
        Window.ALERT: max(1, math.ceil((windows.alert[1] - windows.alert[0]) / bucket_ms)),
    }
    starts = {Window.BASE: windows.base[0], Window.ALERT: windows.alert[0]}

    acc: dict[tuple[str, Window, int], _Accumulator] = {}
    occurrences: dict[tuple[str, Window], int] = {}
    trace_counts = {Window.BASE: 0, Window.ALERT: 0}
    edges: set[tuple[str, str]] = set()
    roots: set[str] = set()

    for trace_id, spans in groups:
        root = next(s for s in spans if s.parent_component_id is None)
        roots.add(root.component_id)
        if len(roots) > 1:
            raise AmbiguousFrontendError(
                f"traces disagree on the root component: {sorted(roots)}"
            )
        # Per (component, window, bucket): sum this trace's span pairs,
        # then contribute one observation to the bucket mean.
        per_bucket: dict[tuple[str, Window, int], _Accumulator] = {}
        windows_hit: dict[str, set[Window]] = {}
        for span, pair in per_span_latencies(spans):
            inl, exl = pair.inclusive_ms, pair.exclusive_ms
            window = windows.window_of(span.entry_ms)
            if window is None:
                continue
            b = (span.entry_ms - starts[window]) // bucket_ms
            b = min(b, n_buckets[window] - 1)
            key = (span.component_id, window, b)
            slot = per_bucket.setdefault(key, _Accumulator())
            slot.sum_inl += inl
            slot.sum_exl += exl
            windows_hit.setdefault(span.component_id, set()).add(window)
            if span.parent_component_id is not None:
                edges.add((span.parent_component_id, span.component_id))
        for key, slot in per_bucket.items():
            total = acc.setdefault(key, _Accumulator())
            total.sum_inl += slot.sum_inl
            total.sum_exl += slot.sum_exl
            total.n += 1
        for cid, hit in windows_hit.items():
            for window in hit:
                occurrences[(cid, window)] = occurrences.get((cid, window), 0) + 1
        root_window = windows.window_of(root.entry_ms)
        if root_window is not None:
            trace_counts[root_window] += 1

    if not roots:
        raise EmptyWindowError("no traces to aggregate")
    for window in (Window.BASE, Window.ALERT):
        if trace_counts[window] == 0:
            raise EmptyWindowError(f"no traces fall in the {window.value} window")

    frontend = next(iter(roots))
    component_ids = sorted({cid for cid, _, _ in acc})

    def series(cid: str, window: Window, which: str) -> TimeSeries:
        values: list[float] = []
        counts: list[int] = []
        for b in range(n_buckets[window]):
            slot = acc.get((cid, window, b))
            if slot is None or slot.n == 0:
                values.append(float("nan"))
                counts.append(0)
            else:
                total = slot.sum_inl if which == "inl" else slot.sum_exl
                values.append(total / slot.n)
                counts.append(slot.n)
        return TimeSeries(
            bucket_ms=bucket_ms,
            start_ms=starts[window],
            values=tuple(values),
            counts=tuple(counts),
        )

    components = [
        ComponentStats(
            component_id=cid,
            inl=PerWindow(series(cid, Window.BASE, "inl"), series(cid, Window.ALERT, "inl")),
            exl=PerWindow(series(cid, Window.BASE, "exl"), series(cid, Window.ALERT, "exl")),
            occurrences=PerWindow(
                occurrences.get((cid, Window.BASE), 0),
                occurrences.get((cid, Window.ALERT), 0),
            ),
        )
        for cid in component_ids
    ]
    return DependencyGraph(components=components, edges=edges, frontend_id=frontend)


# ---------------------------------------------------------------------------
# JSON persistence for graphs and incident cases.


def _series_to_json(ts: TimeSeries) -> dict:
    return {
        "bucket_ms": ts.bucket_ms,
        "start_ms": ts.start_ms,
        "values": [None if math.isnan(v) else v for v in ts.values],
        "counts": list(ts.counts),
    }


def _series_from_json(obj: dict) -> TimeSeries:
    return TimeSeries(
        bucket_ms=obj["bucket_ms"],
        start_ms=obj["start_ms"],
        values=tuple(float("nan") if v is None else float(v) for v in obj["values"]),
        counts=tuple(int(c) for c in obj["counts"]),
    )


def graph_to_json(graph: DependencyGraph, windows: WindowPair) -> dict:
    return {
        "frontend": graph.frontend_id,
        "components": [
            {
                "id": cid,
                "inl": {
                    "base": _series_to_json(graph.components[cid].inl.base),
                    "alert": _series_to_json(graph.components[cid].inl.alert),
                },
                "exl": {
                    "base": _series_to_json(graph.components[cid].exl.base),
                    "alert": _series_to_json(graph.components[cid].exl.alert),
                },
                "occurrences": {
                    "base": graph.components[cid].occurrences.base,
                    "alert": graph.components[cid].occurrences.alert,
                },
            }
            for cid in graph.component_ids
        ],
        "edges": [list(e) for e in graph.sorted_edges()],
        "windows": {"base": list(windows.base), "alert": list(windows.alert)},
    }


def graph_from_json(obj: dict) -> tuple[DependencyGraph, WindowPair]:
    components = [
        ComponentStats(
            component_id=c["id"],
            inl=PerWindow(
                _series_from_json(c["inl"]["base"]), _series_from_json(c["inl"]["alert"])
            ),
            exl=PerWindow(
                _series_from_json(c["exl"]["base"]), _series_from_json(c["exl"]["alert"])
            ),
            occurrences=PerWindow(c["occurrences"]["base"], c["occurrences"]["alert"]),
        )
        for c in obj["components"]
    ]
    graph = DependencyGraph(
        components=components,
        edges=[(a, b) for a, b in obj["edges"]],
        frontend_id=obj["frontend"],
    )
    windows = WindowPair(
        base=tuple(obj["windows"]["base"]), alert=tuple(obj["windows"]["alert"])
    )
    return graph, windows


def case_to_json(case: IncidentCase) -> dict:
    out = graph_to_json(case.graph, case.windows)
    out["truth"] = sorted(case.true_root_causes)
    out["case_id"] = case.case_id
    return out


def case_from_json(obj: dict) -> IncidentCase:
    graph, windows = graph_from_json(obj)
    return IncidentCase(
        graph=graph,
        windows=windows,
        true_root_causes=frozenset(obj.get("truth", [])),
        case_id=obj.get("case_id", "case"),
    )


def write_json(obj: dict, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def read_json(path: Union[str, Path]) -> dict:
    return json.loads(Path(path).read_text())


def load_case(path: Union[str, Path]) -> IncidentCase:
    return case_from_json(read_json(path))
