import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tracerca.metrics import hit_root_cause, pr_at_k, pr_avg, rca_rank_score

from .oracles import pr_at_k_oracle, pr_avg_oracle, rank_score_oracle

ids = st.lists(st.sampled_from("abcdefghij"), unique=True, max_size=10)


class TestPrAtK:
    def test_single_truth_top(self):
        assert pr_at_k(["A", "B", "C"], {"A"}, 1) == 1.0

    def test_partial(self):
        assert pr_at_k(["A", "X", "B"], {"A", "B", "C"}, 3) == pytest.approx(2 / 3)

    def test_short_prediction(self):
        assert pr_at_k(["X"], {"A", "B"}, 5) == 0.0

    def test_empty_truth_rejected(self):
        with pytest.raises(ValueError):
            pr_at_k(["A"], set(), 1)

    def test_bad_k_rejected(self):
        with pytest.raises(ValueError):
            pr_at_k(["A"], {"A"}, 0)

    def test_promoting_a_hit_never_decreases(self):
        pred = ["X", "A", "Y"]
        better = ["A", "X", "Y"]
        for k in range(1, 6):
            assert pr_at_k(better, {"A"}, k) >= pr_at_k(pred, {"A"}, k)


class TestPrAvg:
    def test_perfect_single(self):
        assert pr_avg(["A"], {"A"}) == 1.0

    def test_second_place(self):
        assert pr_avg(["B", "A"], {"A"}) == pytest.approx(0.8)

    def test_all_miss(self):
        assert pr_avg(["X", "Y"], {"A"}) == 0.0


class TestRankScore:
    def test_top_ranked_single_cause(self):
        assert rca_rank_score(["A", "B", "C"], {"A"}) == 1.0

    def test_late_single_cause(self):
        assert rca_rank_score(["B", "C", "A"], {"A"}) == 0.0

    def test_absent_cause(self):
        assert rca_rank_score(["B", "C"], {"A"}) == 0.0

    def test_empty_prediction_scores_zero(self):
        assert rca_rank_score([], {"A"}) == 0.0

    def test_two_causes(self):
        # rank(A)=0 < 2 -> s=0; rank(B)=1 < 2 -> s=1/4
        assert rca_rank_score(["A", "B", "X", "Y"], {"A", "B"}) == pytest.approx(
            (1.0 + 0.75) / 2
        )


class TestHitRootCause:
    def test_all_kept(self):
        assert hit_root_cause({"A", "B"}, {"A", "B"}) == 1.0

    def test_three_of_five(self):
        assert hit_root_cause({"a", "b", "c"}, {"a", "b", "c", "d", "e"}) == 0.6

    def test_none_kept(self):
        assert hit_root_cause({"X"}, {"A"}) == 0.0

    def test_empty_truth_rejected(self):
        with pytest.raises(ValueError):
            hit_root_cause({"A"}, set())


@given(pred=ids, truth=st.sets(st.sampled_from("abcdefghij"), min_size=1, max_size=5))
def test_all_metrics_in_unit_interval(pred, truth):
    for k in (1, 3, 5):
        assert 0.0 <= pr_at_k(pred, truth, k) <= 1.0
    assert 0.0 <= pr_avg(pred, truth) <= 1.0
    assert 0.0 <= rca_rank_score(pred, truth) <= 1.0
    assert 0.0 <= hit_root_cause(set(pred), truth) <= 1.0


@given(pred=ids, truth=st.sets(st.sampled_from("abcdefghij"), min_size=1, max_size=5))
def test_matches_brute_force_oracle(pred, truth):
    assert pr_avg(pred, truth) == pytest.approx(pr_avg_oracle(pred, truth), abs=0)
    assert rca_rank_score(pred, truth) == pytest.approx(rank_score_oracle(pred, truth), abs=0)
    for k in range(1, 6):
        assert pr_at_k(pred, truth, k) == pytest.approx(pr_at_k_oracle(pred, truth, k), abs=0)


def test_pr_avg_is_one_iff_truth_tops_ranking():
    rng = np.random.Generator(np.random.PCG64(0))
    universe = [f"c{i}" for i in range(8)]
    for _ in range(200):
        n_truth = int(rng.integers(1, 5))
        perm = list(rng.permutation(universe))
        truth = set(perm[: n_truth + int(rng.integers(0, 2))][:n_truth])
        truth = set(list(truth)[:n_truth]) or {perm[0]}
        score = pr_avg(perm, truth)
        tops = set(perm[: len(truth)]) == truth
        assert (score == 1.0) == tops
