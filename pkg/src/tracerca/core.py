"""Domain types for traces, components, dependency graphs and analysis windows.

Everything here is immutable after construction and safe to share across
workers. Latencies are milliseconds throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Generic, Iterable, Iterator, Mapping, Optional, Sequence, TypeVar

import numpy as np

T = TypeVar("T")

MISSING = float("nan")


class TraceStructureError(ValueError):
    """A trace's spans do not form a valid single-rooted nested tree."""


class GraphStructureError(ValueError):
    """A dependency graph violates a structural invariant (cycle, unreachable node, ...)."""


class Window(str, Enum):
    BASE = "base"
    ALERT = "alert"


@dataclass(frozen=True)
class SpanRecord:
    """One component invocation inside a single trace."""

    trace_id: str
    component_id: str
    parent_component_id: Optional[str]
    entry_ms: int
    exit_ms: int

    def __post_init__(self) -> None:
        if self.exit_ms < self.entry_ms:
            raise TraceStructureError(
                f"span of {self.component_id!r} in trace {self.trace_id!r} "
                f"exits ({self.exit_ms}) before it enters ({self.entry_ms})"
            )

    @property
    def inclusive_ms(self) -> int:
        return self.exit_ms - self.entry_ms


@dataclass(frozen=True)
class LatencyPair:
    """Inclusive and exclusive latency of one component within one trace.

    ``clamped`` marks that overlapping child spans forced the exclusive
    value up to zero.
    """

    inclusive_ms: float
    exclusive_ms: float
    clamped: bool = False


@dataclass(frozen=True)
class TimeSeries:
    """Fixed-width bucketed series; a bucket with count 0 holds NaN, never a value."""

    bucket_ms: int
    start_ms: int
    values: tuple[float, ...]
    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.values) != len(self.counts):
            raise ValueError("values and counts must have equal length")
        for v, c in zip(self.values, self.counts):
            if c == 0 and not np.isnan(v):
                raise ValueError("bucket with count 0 must carry the missing marker")
            if c > 0 and np.isnan(v):
                raise ValueError("bucket with positive count must carry a value")
            if c < 0:
                raise ValueError("bucket counts must be non-negative")

    def __len__(self) -> int:
        return len(self.values)

    def present_values(self) -> np.ndarray:
        arr = np.asarray(self.values, dtype=float)
        return arr[~np.isnan(arr)]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


@dataclass(frozen=True)
class PerWindow(Generic[T]):
    """A base-window / alert-window pair of the same kind of payload."""

    base: T
    alert: T

    def get(self, window: Window) -> T:
        return self.base if window is Window.BASE else self.alert


@dataclass(frozen=True)
class ComponentStats:
    """Aggregated per-component latency series and trace occurrence counts."""

    component_id: str
    inl: PerWindow[TimeSeries]
    exl: PerWindow[TimeSeries]
    occurrences: PerWindow[int]

    def __post_init__(self) -> None:
        widths = {
            self.inl.base.bucket_ms,
            self.inl.alert.bucket_ms,
            self.exl.base.bucket_ms,
            self.exl.alert.bucket_ms,
        }
        if len(widths) != 1:
            raise ValueError(
                f"component {self.component_id!r}: series bucket widths differ: {sorted(widths)}"
            )


@dataclass(frozen=True)
class WindowPair:
    """Non-overlapping [start, end) intervals: healthy baseline vs incident."""

    base: tuple[int, int]
    alert: tuple[int, int]

    def __post_init__(self) -> None:
        for name, (s, e) in (("base", self.base), ("alert", self.alert)):
            if e <= s:
                raise ValueError(f"{name} window [{s}, {e}) is empty")
        b0, b1 = self.base
        a0, a1 = self.alert
        if max(b0, a0) < min(b1, a1):
            raise ValueError("base and alert windows overlap")

    def window_of(self, t_ms: int) -> Optional[Window]:
        if self.base[0] <= t_ms < self.base[1]:
            return Window.BASE
        if self.alert[0] <= t_ms < self.alert[1]:
            return Window.ALERT
        return None


class DependencyGraph:
    """Aggregated component DAG with the frontend as the unique entry point.

    Edges are (caller, callee) pairs. A single trace is always a tree, but
    the union over traces may reveal several callers for one component, so
    the aggregate is a DAG.
    """

    def __init__(
        self,
        components: Iterable[ComponentStats],
        edges: Iterable[tuple[str, str]],
        frontend_id: str,
    ) -> None:
        comps = {c.component_id: c for c in sorted(components, key=lambda c: c.component_id)}
        edge_set = frozenset((a, b) for a, b in edges)
        if frontend_id not in comps:
            raise GraphStructureError(f"frontend {frontend_id!r} is not a component")
        for a, b in edge_set:
            if a not in comps or b not in comps:
                raise GraphStructureError(f"edge ({a!r}, {b!r}) references unknown component")
        self._components = comps
        self._edges = edge_set
        self.frontend_id = frontend_id
        self._children: dict[str, tuple[str, ...]] = {cid: () for cid in comps}
        self._parents: dict[str, tuple[str, ...]] = {cid: () for cid in comps}
        kids: dict[str, list[str]] = {cid: [] for cid in comps}
        pars: dict[str, list[str]] = {cid: [] for cid in comps}
        for a, b in sorted(edge_set):
            kids[a].append(b)
            pars[b].append(a)
        for cid in comps:
            self._children[cid] = tuple(kids[cid])
            self._parents[cid] = tuple(pars[cid])
        self._topo = self._toposort()
        unreachable = set(comps) - self._reachable_from(frontend_id)
        if unreachable:
            raise GraphStructureError(
                f"components unreachable from frontend: {sorted(unreachable)}"
            )

    def _toposort(self) -> tuple[str, ...]:
        indeg = {cid: len(self._parents[cid]) for cid in self._components}
        ready = sorted(cid for cid, d in indeg.items() if d == 0)
        order: list[str] = []
        while ready:
            cid = ready.pop(0)
            order.append(cid)
            inserted = False
            for child in self._children[cid]:
                indeg[child] -= 1
                if indeg[child] == 0:
                    ready.append(child)
                    inserted = True
            if inserted:
                ready.sort()
        if len(order) != len(self._components):
            raise GraphStructureError("edge set contains a cycle")
        return tuple(order)

    def _reachable_from(self, cid: str) -> set[str]:
        seen = {cid}
        stack = [cid]
        while stack:
            for child in self._children[stack.pop()]:
                if child not in seen:
                    seen.add(child)
                    stack.append(child)
        return seen

    @property
    def components(self) -> Mapping[str, ComponentStats]:
        return self._components

    @property
    def component_ids(self) -> tuple[str, ...]:
        return tuple(self._components)

    @property
    def edges(self) -> frozenset[tuple[str, str]]:
        return self._edges

    def sorted_edges(self) -> list[tuple[str, str]]:
        return sorted(self._edges)

    def children(self, cid: str) -> tuple[str, ...]:
        """Callees of ``cid``."""
        return self._children[cid]

    def parents(self, cid: str) -> tuple[str, ...]:
        """Callers of ``cid``."""
        return self._parents[cid]

    def topological_order(self) -> tuple[str, ...]:
        """Callers before callees; frontend first."""
        return self._topo

    def n_nodes(self) -> int:
        return len(self._components)

    def n_edges(self) -> int:
        return len(self._edges)

    def __contains__(self, cid: str) -> bool:
        return cid in self._components

    def __iter__(self) -> Iterator[str]:
        return iter(self._components)


@dataclass(frozen=True)
class IncidentCase:
    """One labelled (or unlabelled) incident: graph, windows, ground truth."""

    graph: DependencyGraph
    windows: WindowPair
    true_root_causes: frozenset[str] = field(default_factory=frozenset)
    case_id: str = "case"

    def __post_init__(self) -> None:
        unknown = set(self.true_root_causes) - set(self.graph.component_ids)
        if unknown:
            raise ValueError(f"true root causes not in graph: {sorted(unknown)}")


def per_span_latencies(spans: Sequence[SpanRecord]) -> list[tuple[SpanRecord, LatencyPair]]:
    """Validate one trace's spans and compute each span's latency pair.

    Each span's exclusive latency is its own duration minus the inclusive
    durations of its direct child spans, clamped at zero when concurrent
    children overlap. A child is attached to the tightest containing span
    of its declared parent component. Raises
    :class:`TraceStructureError` for malformed traces (multiple roots,
    child escaping its parent's interval, detached subtrees).
    """
    if not spans:
        return []
    trace_id = spans[0].trace_id
    roots = [s for s in spans if s.parent_component_id is None]
    if len(roots) != 1:
        raise TraceStructureError(
            f"trace {trace_id!r} has {len(roots)} root spans, expected exactly 1"
        )
    by_component: dict[str, list[SpanRecord]] = {}
    for s in spans:
        by_component.setdefault(s.component_id, []).append(s)

    children: dict[int, list[SpanRecord]] = {i: [] for i in range(len(spans))}
    index_of = {id(s): i for i, s in enumerate(spans)}
    for s in spans:
        if s.parent_component_id is None:
            continue
        candidates = [
            p
            for p in by_component.get(s.parent_component_id, [])
            if p is not s and p.entry_ms <= s.entry_ms and s.exit_ms <= p.exit_ms
        ]
        if not candidates:
            raise TraceStructureError(
                f"span of {s.component_id!r} in trace {trace_id!r} has no containing "
                f"parent span of {s.parent_component_id!r}"
            )
        parent = min(candidates, key=lambda p: (p.inclusive_ms, p.entry_ms))
        children[index_of[id(parent)]].append(s)

    # Reachability from the root guards against parent cycles among
    # equal-interval spans.
    reached: set[int] = set()
    stack = [index_of[id(roots[0])]]
    while stack:
        i = stack.pop()
        if i in reached:
            continue
        reached.add(i)
        stack.extend(index_of[id(c)] for c in children[i])
    if len(reached) != len(spans):
        orphan = next(s for i, s in enumerate(spans) if i not in reached)
        raise TraceStructureError(
            f"span of {orphan.component_id!r} in trace {trace_id!r} is not reachable "
            f"from the root (parent cycle or detached subtree)"
        )

    out: list[tuple[SpanRecord, LatencyPair]] = []
    for i, s in enumerate(spans):
        inclusive = float(s.inclusive_ms)
        child_sum = float(sum(c.inclusive_ms for c in children[i]))
        exclusive = inclusive - child_sum
        clamped = exclusive < 0
        if clamped:
            exclusive = 0.0
        out.append((s, LatencyPair(inclusive, exclusive, clamped)))
    return out


def span_latencies(spans: Sequence[SpanRecord]) -> dict[str, LatencyPair]:
    """Per-component inclusive/exclusive latency for the spans of one trace.

    Components invoked several times in the trace have their pairs summed.
    """
    totals: dict[str, LatencyPair] = {}
    for s, pair in per_span_latencies(spans):
        prev = totals.get(s.component_id)
        if prev is None:
            totals[s.component_id] = pair
        else:
            totals[s.component_id] = LatencyPair(
                prev.inclusive_ms + pair.inclusive_ms,
                prev.exclusive_ms + pair.exclusive_ms,
                prev.clamped or pair.clamped,
            )
    return totals


def descendants(graph: DependencyGraph, cid: str) -> frozenset[str]:
    """All components transitively invoked by ``cid``, excluding itself."""
    if cid not in graph:
        raise KeyError(cid)
    seen: set[str] = set()
    stack = list(graph.children(cid))
    while stack:
        node = stack.pop()
        if node in seen:
            continue
        seen.add(node)
        stack.extend(graph.children(node))
    return frozenset(seen)
