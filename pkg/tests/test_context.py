import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refinery.context import (
    ContextItem,
    ContextQuery,
    HistoryError,
    HistoryStore,
    ScoringWeights,
    render_bundle,
    score_item,
    select_context,
)

ONES = ScoringWeights()


def item(id, size=1, **kw):
    kw.setdefault("origin", "code_excerpt")
    return ContextItem(id=id, payload="x" * max(size, 1), size=size, **kw)


class TestScoring:
    def test_full_score(self):
        x = ContextItem("h1", "boom", "test_failure", iteration=5, severity_class="high",
                        failure_count=0, complexity=0.5, anomalous_logs=True)
        # recent failure + high severity + log(1) + 0.5 + anomaly
        assert score_item(x, ONES, current_iteration=5) == pytest.approx(3.5, abs=1e-12)

    def test_failure_count_log_term(self):
        x = ContextItem("h1", "boom", "test_failure", iteration=5, severity_class="high",
                        failure_count=math.e - 1, complexity=0.5, anomalous_logs=True)
        assert score_item(x, ONES, 5) == pytest.approx(4.5, abs=1e-12)

    def test_old_failure_is_not_recent(self):
        x = ContextItem("h1", "boom", "test_failure", iteration=1)
        assert score_item(x, ONES, current_iteration=10, recency=3) == 0.0
        assert score_item(x, ONES, current_iteration=4, recency=3) == 1.0

    def test_code_excerpt_never_counts_as_failure(self):
        assert score_item(item("c", origin="code_excerpt"), ONES, 0) == 0.0

    def test_weights_scale_terms(self):
        w = ScoringWeights(theta2=3.0, theta4=0.0)
        x = ContextItem("h", "p", "structural_finding", severity_class="high", complexity=9)
        assert score_item(x, w, 0) == 3.0

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            ScoringWeights(theta3=-1)


class TestSelection:
    def test_small_instance(self):
        xs = [item("A", 6), item("B", 5), item("C", 5)]
        b = select_context(xs, ONES, 10, scores={"A": 10, "B": 6, "C": 5})
        assert set(b.items) == {"B", "C"}
        assert b.total_score == 11 and b.total_size == 10

    def test_items_ordered_by_descending_score(self):
        xs = [item("a", 1), item("b", 1), item("c", 1)]
        b = select_context(xs, ONES, 10, scores={"a": 1, "b": 3, "c": 2})
        assert b.items == ("b", "c", "a")

    def test_zero_budget_empty(self):
        b = select_context([item("a", 1)], ONES, 0, scores={"a": 5})
        assert b.items == () and b.total_size == 0

    def test_zero_size_items_always_fit(self):
        b = select_context([item("a", 0), item("b", 5)], ONES, 0, scores={"a": 1, "b": 1})
        assert b.items == ("a",)

    def test_oversized_item_skipped(self):
        b = select_context([item("a", 50), item("b", 3)], ONES, 10, scores={"a": 100, "b": 1})
        assert b.items == ("b",)

    def test_negative_budget_rejected(self):
        with pytest.raises(ValueError):
            select_context([], ONES, -1)

    def test_query_filters_by_origin_and_iteration(self):
        xs = [item(f"h{i}", 1, origin=o, iteration=i, severity_class="high")
              for i, o in enumerate(["test_failure", "log_excerpt", "test_failure",
                                     "verify_finding", "test_failure", "code_excerpt"])]
        q = ContextQuery(origins=frozenset({"test_failure"}), min_iteration=1)
        b = select_context(xs, ONES, 100, query=q, current_iteration=5)
        assert set(b.items) == {"h2", "h4"}

    def test_huge_budget_uses_frontier_path(self):
        xs = [item(f"i{k}", 10**6 + k) for k in range(12)]
        scores = {f"i{k}": float((k * 7) % 5 + 1) for k in range(12)}
        budget = 3 * 10**6 + 40
        b = select_context(xs, ONES, budget, scores=scores)
        assert b.total_score == pytest.approx(brute(xs, scores, budget), abs=1e-9)


def brute(xs, scores, budget):
    best = 0.0
    for r in range(len(xs) + 1):
        for combo in itertools.combinations(xs, r):
            if sum(x.size for x in combo) <= budget:
                best = max(best, math.fsum(scores[x.id] for x in combo))
    return best


def dp_optimum(sizes, values, budget):
    best = np.zeros(budget + 1)
    for s, v in zip(sizes, values):
        if s <= budget:
            best[s:] = np.maximum(best[s:], best[: budget + 1 - s] + v)
    return best[budget]


@st.composite
def instances(draw, max_items=15):
    n = draw(st.integers(0, max_items))
    sizes = draw(st.lists(st.integers(0, 30), min_size=n, max_size=n))
    values = draw(st.lists(st.floats(0.0, 10.0), min_size=n, max_size=n))
    budget = draw(st.integers(0, 120))
    xs = [item(f"x{i:02d}", s) for i, s in enumerate(sizes)]
    return xs, {x.id: v for x, v in zip(xs, values)}, budget


@settings(max_examples=150, deadline=None)
@given(instances())
def test_exact_matches_enumeration(case):
    xs, scores, budget = case
    b = select_context(xs, ONES, budget, scores=scores)
    assert b.total_size <= budget
    assert b.total_score == pytest.approx(brute(xs, scores, budget), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(instances(max_items=60))
def test_budget_never_exceeded(case):
    xs, scores, budget = case
    b = select_context(xs, ONES, budget, scores=scores)
    assert b.total_size == sum(x.size for x in xs if x.id in b.items) <= budget


def test_large_instances_near_optimal():
    rng = np.random.default_rng(11)
    for _ in range(20):
        sizes = rng.integers(1, 100, size=100)
        values = rng.uniform(0.1, 10.0, size=100)
        budget = int(sizes.sum() // 4)
        xs = [item(f"x{i:03d}", int(s)) for i, s in enumerate(sizes)]
        scores = {x.id: float(v) for x, v in zip(xs, values)}
        b = select_context(xs, ONES, budget, scores=scores)
        assert b.total_size <= budget
        assert b.total_score >= 0.8 * dp_optimum(sizes, values, budget)


class TestHistory:
    def test_append_and_reload(self, tmp_path):
        path = tmp_path / "h.jsonl"
        store = HistoryStore(path)
        for i in range(6):
            origin = "test_failure" if i % 2 == 0 else "log_excerpt"
            store.append(ContextItem(store.next_id(), f"p{i}", origin, iteration=i))
        again = HistoryStore(path)
        assert [x.id for x in again.filter("test_failure")] == ["h000000", "h000002", "h000004"]
        assert len(again) == 6
        assert again.get("h000003").payload == "p3"

    def test_duplicate_and_empty_rejected(self):
        store = HistoryStore()
        store.append(ContextItem("a", "p", "code_excerpt"))
        with pytest.raises(ValueError):
            store.append(ContextItem("a", "q", "code_excerpt"))
        with pytest.raises(ValueError):
            store.append(ContextItem("b", "", "code_excerpt"))

    def test_truncate(self, tmp_path):
        store = HistoryStore(tmp_path / "h.jsonl")
        for i in range(4):
            store.append(ContextItem(store.next_id(), "p", "code_excerpt"))
        store.truncate(2)
        assert len(HistoryStore(tmp_path / "h.jsonl")) == 2
        assert store.next_id() == "h000002"

    def test_unwritable_path_is_fatal(self, tmp_path):
        store = HistoryStore(tmp_path / "missing" / "h.jsonl")
        with pytest.raises(HistoryError):
            store.append(ContextItem("a", "p", "code_excerpt"))

    def test_render_keeps_bundle_order(self):
        store = HistoryStore()
        store.append(ContextItem("a", "first", "test_failure", iteration=2))
        store.append(ContextItem("b", "second", "log_excerpt"))
        b = select_context(store.snapshot(), ONES, 100, scores={"a": 1, "b": 2})
        text = render_bundle(b, store)
        assert text.index("second") < text.index("first")
        assert "[test_failure] a" in text


def test_unknown_origin_rejected():
    with pytest.raises(ValueError):
        ContextItem("a", "p", "rumour")
