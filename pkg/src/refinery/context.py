"""History store and budgeted context retrieval.

Items are scored by a weighted sum of recency, severity, failure count,
complexity and anomaly indicators; a bundle is the score-maximizing
subset whose total size fits the budget (a 0/1 knapsack).
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import asdict, dataclass, field
from functools import reduce
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

ORIGINS = ("test_failure", "structural_finding", "verify_finding", "log_excerpt",
           "code_excerpt", "prior_feedback")
EXACT_LIMIT = 25
DP_CELLS = 5_000_000
DEFAULT_RECENCY = 3


class HistoryError(Exception):
    """Storage failure; fatal for a run."""


@dataclass(frozen=True)
class ContextItem:
    id: str
    payload: str
    origin: str
    iteration: int = 0
    severity_class: str = "low"
    failure_count: int = 0
    complexity: float = 0.0
    anomalous_logs: bool = False
    size: int | None = None

    def __post_init__(self):
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")
        if self.severity_class not in ("low", "high"):
            raise ValueError(f"unknown severity class {self.severity_class!r}")
        if self.failure_count < 0 or self.complexity < 0:
            raise ValueError("failure_count and complexity must be non-negative")
        if self.size is None:
            object.__setattr__(self, "size", len(self.payload))
        elif self.size < 0:
            raise ValueError("size must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ContextItem":
        return cls(**d)


@dataclass(frozen=True)
class ScoringWeights:
    theta1: float = 1.0
    theta2: float = 1.0
    theta3: float = 1.0
    theta4: float = 1.0
    theta5: float = 1.0

    def __post_init__(self):
        if any(t < 0 for t in self.as_tuple()):
            raise ValueError("scoring weights must be non-negative")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.theta1, self.theta2, self.theta3, self.theta4, self.theta5)


@dataclass(frozen=True)
class ContextQuery:
    """Structured filter: allowed origins and an inclusive iteration range."""

    origins: frozenset[str] | None = None
    min_iteration: int | None = None
    max_iteration: int | None = None

    def matches(self, x: ContextItem) -> bool:
        if self.origins is not None and x.origin not in self.origins:
            return False
        if self.min_iteration is not None and x.iteration < self.min_iteration:
            return False
        if self.max_iteration is not None and x.iteration > self.max_iteration:
            return False
        return True


@dataclass(frozen=True)
class ContextBundle:
    items: tuple[str, ...] = ()
    total_size: int = 0
    total_score: float = 0.0
    scores: Mapping[str, float] = field(default_factory=dict)


def score_item(x: ContextItem, w: ScoringWeights, current_iteration: int,
               recency: int = DEFAULT_RECENCY) -> float:
    recent_failure = (x.origin in ("test_failure", "verify_finding")
                      and x.iteration >= current_iteration - recency)
    return (w.theta1 * recent_failure
            + w.theta2 * (x.severity_class == "high")
            + w.theta3 * math.log1p(x.failure_count)
            + w.theta4 * x.complexity
            + w.theta5 * x.anomalous_logs)


def _knapsack_exact(order: list[int], scores: list[float], sizes: list[int],
                    budget: int) -> list[int]:
    """Capacity DP; sizes are divided by their gcd first."""
    g = reduce(math.gcd, (sizes[i] for i in order if sizes[i] > 0), 0) or 1
    cap = min(budget, sum(sizes[i] for i in order)) // g
    if (cap + 1) * max(len(order), 1) > DP_CELLS:
        return _knapsack_pareto(order, scores, sizes, budget)
    best = np.zeros(cap + 1)
    take = np.zeros((len(order), cap + 1), dtype=bool)
    for k, i in enumerate(order):
        s = sizes[i] // g
        if s > cap:
            continue
        cand = best.copy()
        cand[s:] = best[: cap + 1 - s] + scores[i]
        better = cand > best
        take[k] = better
        best = np.where(better, cand, best)
    chosen = []
    c = cap
    for k in range(len(order) - 1, -1, -1):
        if take[k, c]:
            chosen.append(order[k])
            c -= sizes[order[k]] // g
    return chosen


def _knapsack_pareto(order: list[int], scores: list[float], sizes: list[int],
                     budget: int) -> list[int]:
    """Exact frontier of non-dominated (size, score) states; for huge budgets."""
    states = [(0, 0.0, ())]
    for i in order:
        grown = [(s + sizes[i], v + scores[i], sel + (i,))
                 for s, v, sel in states if s + sizes[i] <= budget]
        merged = sorted(states + grown, key=lambda t: (t[0], -t[1]))
        states = []
        for st in merged:
            if not states or st[1] > states[-1][1]:
                states.append(st)
    return list(max(states, key=lambda t: t[1])[2])


def _knapsack_greedy(order: list[int], scores: list[float], sizes: list[int],
                     budget: int) -> list[int]:
    def density(i):
        return scores[i] / sizes[i] if sizes[i] else math.inf

    chosen: list[int] = []
    used = 0
    for i in sorted(order, key=lambda i: -density(i)):  # stable: keeps id order on ties
        if used + sizes[i] <= budget:
            chosen.append(i)
            used += sizes[i]
    # single-item swap / add improvement
    improved = True
    while improved:
        improved = False
        inside = set(chosen)
        outside = [i for i in order if i not in inside]
        best_gain, best_move = 1e-12, None
        for j in outside:
            if used + sizes[j] <= budget and scores[j] > best_gain:
                best_gain, best_move = scores[j], (None, j)
            for i in chosen:
                if used - sizes[i] + sizes[j] <= budget:
                    gain = scores[j] - scores[i]
                    if gain > best_gain:
                        best_gain, best_move = gain, (i, j)
        if best_move is not None:
            out, inn = best_move
            if out is not None:
                chosen.remove(out)
                used -= sizes[out]
            chosen.append(inn)
            used += sizes[inn]
            improved = True
    return chosen


def select_context(
    items: Sequence[ContextItem],
    w: ScoringWeights,
    budget: int,
    query: ContextQuery | None = None,
    current_iteration: int = 0,
    recency: int = DEFAULT_RECENCY,
    scores: Mapping[str, float] | None = None,
) -> ContextBundle:
    """Pick the best-scoring subset of matching items with total size <= budget.

    ``scores`` lets callers supply precomputed scores by item id.
    """
    if budget < 0:
        raise ValueError("budget must be >= 0")
    query = query or ContextQuery()
    pool = sorted((x for x in items if query.matches(x)), key=lambda x: x.id)
    if scores is None:
        sc = [score_item(x, w, current_iteration, recency) for x in pool]
    else:
        sc = [float(scores[x.id]) for x in pool]
    sizes = [int(x.size) for x in pool]
    # zero-score items add nothing; drop them so bundles stay minimal
    order = [i for i in range(len(pool)) if sc[i] > 0 and sizes[i] <= budget]
    if len(order) <= EXACT_LIMIT:
        chosen = _knapsack_exact(order, sc, sizes, budget)
    else:
        chosen = _knapsack_greedy(order, sc, sizes, budget)
    chosen.sort(key=lambda i: (-sc[i], pool[i].id))
    picked = [pool[i] for i in chosen]
    return ContextBundle(
        items=tuple(x.id for x in picked),
        total_size=sum(sizes[i] for i in chosen),
        total_score=math.fsum(sc[i] for i in chosen),
        scores={pool[i].id: sc[i] for i in chosen},
    )


class HistoryStore:
    """Append-only item store, optionally mirrored to a JSON-lines file."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._items: list[ContextItem] = []
        self._index: dict[str, int] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    self._add(ContextItem.from_dict(json.loads(line)))

    def _add(self, item: ContextItem) -> None:
        self._index[item.id] = len(self._items)
        self._items.append(item)

    def append(self, item: ContextItem) -> str:
        if not item.payload:
            raise ValueError("payload must be non-empty")
        with self._lock:
            if item.id in self._index:
                raise ValueError(f"duplicate history id {item.id!r}")
            if self.path is not None:
                try:
                    with self.path.open("a") as fh:
                        fh.write(json.dumps(item.to_dict(), sort_keys=True) + "\n")
                except OSError as exc:
                    raise HistoryError(f"cannot append to {self.path}: {exc}") from exc
            self._add(item)
        return item.id

    def next_id(self) -> str:
        return f"h{len(self._items):06d}"

    def get(self, item_id: str) -> ContextItem:
        return self._items[self._index[item_id]]

    def snapshot(self) -> list[ContextItem]:
        with self._lock:
            return list(self._items)

    def filter(self, origin: str | Iterable[str] | None = None) -> list[ContextItem]:
        if origin is None:
            return self.snapshot()
        wanted = {origin} if isinstance(origin, str) else set(origin)
        return [x for x in self.snapshot() if x.origin in wanted]

    def truncate(self, n: int) -> None:
        """Drop everything after the first ``n`` items (resume after a torn write)."""
        with self._lock:
            self._items = self._items[:n]
            self._index = {x.id: i for i, x in enumerate(self._items)}
            if self.path is not None:
                self.path.write_text("".join(json.dumps(x.to_dict(), sort_keys=True) + "\n"
                                             for x in self._items))

    def __len__(self):
        return len(self._items)


def render_bundle(bundle: ContextBundle, store: HistoryStore | Mapping[str, ContextItem]) -> str:
    """Concatenate bundle items (already in descending-score order) with origin headers."""
    get = store.get if isinstance(store, HistoryStore) else store.__getitem__
    parts = []
    for item_id in bundle.items:
        x = get(item_id)
        parts.append(f"### [{x.origin}] {x.id} (iteration {x.iteration})\n{x.payload}")
    return "\n\n".join(parts)
