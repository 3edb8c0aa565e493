import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracerca.core import (
    DependencyGraph,
    GraphStructureError,
    SpanRecord,
    TimeSeries,
    TraceStructureError,
    WindowPair,
    descendants,
    span_latencies,
)

from .conftest import graph_from, stats


def span(component, entry, exit, parent=None, trace="t1"):
    return SpanRecord(
        trace_id=trace,
        component_id=component,
        parent_component_id=parent,
        entry_ms=entry,
        exit_ms=exit,
    )


class TestSpanLatencies:
    def test_root_with_one_child(self):
        pairs = span_latencies([span("root", 0, 100), span("child", 10, 40, parent="root")])
        assert pairs["root"].inclusive_ms == 100
        assert pairs["root"].exclusive_ms == 70
        assert pairs["child"].inclusive_ms == 30
        assert pairs["child"].exclusive_ms == 30

    def test_zero_duration_span(self):
        pairs = span_latencies([span("a", 5, 5)])
        assert pairs["a"].inclusive_ms == 0
        assert pairs["a"].exclusive_ms == 0

    def test_overlapping_siblings_clamp_to_zero(self):
        pairs = span_latencies(
            [
                span("root", 0, 100),
                span("x", 0, 60, parent="root"),
                span("y", 50, 100, parent="root"),
            ]
        )
        assert pairs["root"].exclusive_ms == 0.0
        assert pairs["root"].clamped

    def test_multiple_invocations_sum(self):
        pairs = span_latencies(
            [
                span("root", 0, 100),
                span("w", 10, 20, parent="root"),
                span("w", 30, 45, parent="root"),
            ]
        )
        assert pairs["w"].inclusive_ms == 25
        assert pairs["w"].exclusive_ms == 25
        assert pairs["root"].exclusive_ms == 75

    def test_two_roots_rejected(self):
        with pytest.raises(TraceStructureError, match="2 root spans"):
            span_latencies([span("a", 0, 10), span("b", 20, 30)])

    def test_child_escaping_parent_rejected(self):
        with pytest.raises(TraceStructureError, match="no containing parent"):
            span_latencies([span("root", 0, 50), span("c", 40, 80, parent="root")])

    def test_unknown_parent_rejected(self):
        with pytest.raises(TraceStructureError, match="no containing parent"):
            span_latencies([span("root", 0, 50), span("c", 10, 20, parent="ghost")])

    def test_exit_before_entry_rejected(self):
        with pytest.raises(TraceStructureError):
            span("a", 10, 5)

    @given(st.randoms(use_true_random=False))
    def test_permutation_invariance(self, rnd):
        spans = [
            span("root", 0, 1000),
            span("a", 10, 200, parent="root"),
            span("b", 250, 900, parent="root"),
            span("c", 300, 400, parent="b"),
            span("a", 500, 600, parent="b"),
        ]
        shuffled = list(spans)
        rnd.shuffle(shuffled)
        assert span_latencies(shuffled) == span_latencies(spans)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_exclusive_sum_never_exceeds_root_inclusive(self, seed):
        spans = _random_nested_trace(np.random.Generator(np.random.PCG64(seed)))
        pairs = span_latencies(spans)
        root_inl = max(p.inclusive_ms for p in pairs.values())
        total_exl = sum(p.exclusive_ms for p in pairs.values())
        assert total_exl <= root_inl + 1e-9
        # sequential nesting in the builder means no overlap: exact equality
        assert total_exl == pytest.approx(root_inl)


def _random_nested_trace(rng, max_children=3, depth=3):
    """Sequentially nested spans: children partition part of the parent."""
    spans = []
    counter = [0]

    def build(parent_name, entry, budget, level):
        name = f"s{counter[0]}"
        counter[0] += 1
        n_children = int(rng.integers(0, max_children + 1)) if level < depth else 0
        cursor = entry + int(budget * 0.2)  # own work first
        child_budget = (entry + budget - cursor) // max(n_children, 1)
        spans.append(span(name, entry, entry + budget, parent=parent_name))
        for _ in range(n_children):
            if child_budget < 2:
                break
            build(name, cursor, child_budget, level + 1)
            cursor += child_budget

    build(None, 0, 10_000, 0)
    return spans


class TestDescendants:
    def test_running_example(self, running_example_graph):
        assert descendants(running_example_graph, "B") >= {"C", "E", "F"}

    def test_leaf_is_empty(self, running_example_graph):
        assert descendants(running_example_graph, "F") == frozenset()

    def test_chain(self):
        flat = [1.0, 1.0]
        comps = {c: stats(c, flat, flat) for c in "abc"}
        g = graph_from([("a", "b"), ("b", "c")], comps, "a")
        assert descendants(g, "a") == {"b", "c"}

    def test_unknown_id(self, running_example_graph):
        with pytest.raises(KeyError):
            descendants(running_example_graph, "nope")

    def test_transitivity(self, running_example_graph):
        g = running_example_graph
        for x in g.component_ids:
            for y in descendants(g, x):
                assert descendants(g, y) <= descendants(g, x)


class TestGraphInvariants:
    def test_cycle_rejected(self):
        flat = [1.0]
        comps = {c: stats(c, flat, flat) for c in "ab"}
        with pytest.raises(GraphStructureError, match="cycle"):
            graph_from([("a", "b"), ("b", "a")], comps, "a")

    def test_unreachable_rejected(self):
        flat = [1.0]
        comps = {c: stats(c, flat, flat) for c in "abc"}
        with pytest.raises(GraphStructureError, match="unreachable"):
            graph_from([("a", "b")], comps, "a")

    def test_unknown_frontend_rejected(self):
        flat = [1.0]
        comps = {c: stats(c, flat, flat) for c in "ab"}
        with pytest.raises(GraphStructureError, match="frontend"):
            graph_from([("a", "b")], comps, "z")

    def test_topological_order_callers_first(self, running_example_graph):
        order = running_example_graph.topological_order()
        pos = {cid: i for i, cid in enumerate(order)}
        for a, b in running_example_graph.edges:
            assert pos[a] < pos[b]


class TestTimeSeries:
    def test_zero_count_requires_missing_marker(self):
        with pytest.raises(ValueError, match="missing marker"):
            TimeSeries(bucket_ms=1, start_ms=0, values=(1.0,), counts=(0,))

    def test_positive_count_requires_value(self):
        with pytest.raises(ValueError, match="value"):
            TimeSeries(bucket_ms=1, start_ms=0, values=(float("nan"),), counts=(2,))

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="equal length"):
            TimeSeries(bucket_ms=1, start_ms=0, values=(1.0,), counts=(1, 1))


class TestWindowPair:
    def test_overlap_rejected(self):
        with pytest.raises(ValueError, match="overlap"):
            WindowPair(base=(0, 100), alert=(50, 150))

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            WindowPair(base=(0, 0), alert=(10, 20))

    def test_window_of(self):
        w = WindowPair(base=(0, 100), alert=(100, 200))
        assert w.window_of(0) is not None
        assert w.window_of(150).value == "alert"
        assert w.window_of(250) is None
