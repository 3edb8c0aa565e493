import json
import math

import numpy as np
import pytest

from tracerca.core import Window, WindowPair
from tracerca.ingest import (
    AmbiguousFrontendError,
    EmptyWindowError,
    IngestError,
    aggregate,
    case_from_json,
    case_to_json,
    graph_from_json,
    graph_to_json,
    load_traces,
    sample_traces,
)

BUCKET = 60_000
WINDOWS = WindowPair(base=(0, 2 * BUCKET), alert=(2 * BUCKET, 4 * BUCKET))


def jl(trace, comp, parent, entry, exit):
    return json.dumps(
        {"trace_id": trace, "component": comp, "parent": parent, "entry_ms": entry, "exit_ms": exit}
    )


def spans_text(
    traces: int = 3, start: int = 0, broken_trace: str | None = None
) -> str:
    lines = []
    for i in range(traces):
        t = f"t{i}"
        base = start + i * 10
        lines.append(jl(t, "root", None, base, base + 9))
        lines.append(jl(t, "leaf", "root", base + 1, base + 4))
        if broken_trace == t:
            lines.append(jl(t, "stray", None, base, base + 2))  # second root
    return "\n".join(lines) + "\n"


class TestLoadTraces:
    def test_groups_and_warnings(self, tmp_path):
        f = tmp_path / "spans.jsonl"
        f.write_text(spans_text(traces=3, broken_trace="t1"))
        result = load_traces(f)
        assert len(result) == 2
        assert result.skipped == 1
        assert len(result.warnings) == 1
        assert "t1" in result.warnings[0]

    def test_empty_file(self, tmp_path):
        f = tmp_path / "empty.jsonl"
        f.write_text("")
        assert len(load_traces(f)) == 0

    def test_invalid_json_line_number(self, tmp_path):
        f = tmp_path / "bad.jsonl"
        f.write_text(jl("t0", "root", None, 0, 5) + "\n{nope\n")
        with pytest.raises(IngestError, match="line 2"):
            load_traces(f)

    def test_missing_key_line_number(self, tmp_path):
        f = tmp_path / "bad.jsonl"
        f.write_text('{"trace_id": "t", "component": "c"}\n')
        with pytest.raises(IngestError, match="line 1"):
            load_traces(f)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestError, match="no such file"):
            load_traces(tmp_path / "nope.jsonl")

    def test_group_count_matches_distinct_ids(self, tmp_path):
        rng = np.random.Generator(np.random.PCG64(1))
        lines = []
        for i in range(1200):
            t = f"t{i}"
            lines.append(jl(t, "root", None, 0, 100))
            for k in range(int(rng.integers(1, 8))):
                lines.append(jl(t, f"leaf{k}", "root", 5 + 10 * k, 10 + 10 * k))
        f = tmp_path / "many.jsonl"
        f.write_text("\n".join(lines) + "\n")
        distinct = len({json.loads(l)["trace_id"] for l in lines})
        assert len(load_traces(f)) == distinct


class TestSampleTraces:
    def _groups(self, n):
        return [(f"t{i}", []) for i in range(n)]

    def test_rate_one_is_identity(self):
        groups = self._groups(100)
        assert sample_traces(groups, 1.0, seed=0) == groups

    def test_binomial_bound(self):
        groups = self._groups(100_000)
        kept = sample_traces(groups, 0.01, seed=42)
        sigma = math.sqrt(100_000 * 0.01 * 0.99)
        assert abs(len(kept) - 1000) <= 3 * sigma

    def test_deterministic_under_seed(self):
        groups = self._groups(5000)
        a = sample_traces(groups, 0.2, seed=7)
        b = sample_traces(groups, 0.2, seed=7)
        assert a == b
        c = sample_traces(groups, 0.2, seed=8)
        assert a != c

    def test_order_independent(self):
        groups = self._groups(2000)
        kept = {t for t, _ in sample_traces(groups, 0.3, seed=1)}
        kept_rev = {t for t, _ in sample_traces(list(reversed(groups)), 0.3, seed=1)}
        assert kept == kept_rev

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            sample_traces([], 0.0, seed=0)
        with pytest.raises(ValueError):
            sample_traces([], 1.5, seed=0)


def _trace(t, root_entry, exl_leaf=3, comp="A"):
    from tracerca.core import SpanRecord

    return (
        t,
        [
            SpanRecord(t, "root", None, root_entry, root_entry + 50),
            SpanRecord(t, comp, "root", root_entry + 2, root_entry + 2 + exl_leaf),
        ],
    )


class TestAggregate:
    def test_bucket_mean_of_two_traces(self):
        groups = [_trace("t0", 100, exl_leaf=10), _trace("t1", 200, exl_leaf=30)]
        g = aggregate(groups + [_trace("t2", 2 * BUCKET + 5)], WINDOWS, bucket_ms=BUCKET)
        a = g.components["A"]
        assert a.exl.base.values[0] == pytest.approx(20.0)  # mean of 10 and 30
        assert a.exl.base.counts[0] == 2

    def test_absent_bucket_is_missing(self):
        groups = [_trace("t0", 100), _trace("t1", 2 * BUCKET + 5)]
        g = aggregate(groups, WINDOWS, bucket_ms=BUCKET)
        a = g.components["A"]
        assert math.isnan(a.inl.base.values[1])
        assert a.inl.base.counts[1] == 0

    def test_counts_bounded_by_traces(self):
        groups = [_trace(f"t{i}", 100 + i) for i in range(5)]
        groups += [_trace("ta", 2 * BUCKET + 5)]
        g = aggregate(groups, WINDOWS, bucket_ms=BUCKET)
        for comp in g.components.values():
            for window in (Window.BASE, Window.ALERT):
                assert max(comp.inl.get(window).counts) <= 6

    def test_order_invariance(self):
        groups = [_trace(f"t{i}", 50 * i) for i in range(6)] + [_trace("ta", 2 * BUCKET + 1)]
        g1 = aggregate(groups, WINDOWS, bucket_ms=BUCKET)
        g2 = aggregate(list(reversed(groups)), WINDOWS, bucket_ms=BUCKET)
        assert graph_to_json(g1, WINDOWS) == graph_to_json(g2, WINDOWS)

    def test_empty_window_rejected(self):
        with pytest.raises(EmptyWindowError):
            aggregate([_trace("t0", 100)], WINDOWS, bucket_ms=BUCKET)

    def test_ambiguous_frontend_rejected(self):
        from tracerca.core import SpanRecord

        groups = [
            _trace("t0", 100),
            ("t1", [SpanRecord("t1", "other_root", None, 2 * BUCKET + 5, 2 * BUCKET + 9)]),
        ]
        with pytest.raises(AmbiguousFrontendError):
            aggregate(groups, WINDOWS, bucket_ms=BUCKET)

    def test_edges_match_generator_topology(self):
        from tracerca.simgen import GenConfig, generate_case

        cfg = GenConfig(
            n_components=25,
            invocation_prob=1.0,
            traces_per_bucket=4,
            base_buckets=3,
            alert_buckets=2,
            seed=5,
        )
        gc = generate_case(cfg)
        topo = gc.topology
        expected = {
            (topo.ids[topo.parent[i]], topo.ids[i]) for i in range(1, len(topo.ids))
        }
        assert gc.case.graph.edges == expected


class TestJsonRoundTrip:
    def test_graph_round_trip(self, small_incident):
        case = small_incident.case
        payload = graph_to_json(case.graph, case.windows)
        graph2, windows2 = graph_from_json(payload)
        assert graph_to_json(graph2, windows2) == payload

    def test_case_round_trip(self, small_incident):
        payload = case_to_json(small_incident.case)
        case2 = case_from_json(payload)
        assert case_to_json(case2) == payload
        assert case2.true_root_causes == small_incident.case.true_root_causes
