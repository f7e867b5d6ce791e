"""Compliance and composite-error metrics.

Everything here is a pure function over immutable inputs. Channel errors
are weighted failure ratios in [0, 1]; the composite error ``delta`` is the
alpha-weighted mean of the channels that are actually present.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

CLAUSE_KINDS = ("test", "structural", "verify")
CHANNELS = ("test", "struct", "verify", "logs")

_KIND_CHANNEL = {"test": "test", "structural": "struct", "verify": "verify"}


class MetricError(ValueError):
    """Raised on malformed metric inputs (shape mismatch, bad ranges)."""


class EmptyChannel(MetricError):
    """A channel has no clauses, so its error is undefined."""


@dataclass(frozen=True)
class SpecClause:
    id: str
    kind: str
    weight: float = 1.0
    description: str = ""

    def __post_init__(self):
        if self.kind not in CLAUSE_KINDS:
            raise MetricError(f"clause {self.id!r}: unknown kind {self.kind!r}")
        if not self.weight > 0:
            raise MetricError(f"clause {self.id!r}: weight must be > 0, got {self.weight}")

    @property
    def channel(self) -> str:
        return _KIND_CHANNEL[self.kind]

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind, "weight": self.weight,
                "description": self.description}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SpecClause":
        return cls(id=str(d["id"]), kind=d["kind"], weight=float(d.get("weight", 1.0)),
                   description=d.get("description", ""))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class Specification:
    clauses: tuple[SpecClause, ...] = ()
    version: int = 0

    def __post_init__(self):
        object.__setattr__(self, "clauses", tuple(self.clauses))
        ids = [c.id for c in self.clauses]
        if len(set(ids)) != len(ids):
            raise MetricError("duplicate clause ids in specification")

    def __len__(self):
        return len(self.clauses)

    def of_kind(self, kind: str) -> list[SpecClause]:
        return [c for c in self.clauses if c.kind == kind]

    def get(self, clause_id: str) -> SpecClause:
        for c in self.clauses:
            if c.id == clause_id:
                return c
        raise KeyError(clause_id)

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.clauses]

    def extended(self, new_clauses: Iterable[SpecClause]) -> "Specification":
        return Specification(self.clauses + tuple(new_clauses), self.version + 1)

    def to_dict(self) -> dict:
        return {"version": self.version, "clauses": [c.to_dict() for c in self.clauses]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Specification":
        return cls(tuple(SpecClause.from_dict(c) for c in d["clauses"]), int(d.get("version", 0)))


@dataclass(frozen=True)
class TestOutcome:
    clause_id: str
    passed: bool

    __test__ = False  # keep pytest from collecting this

    @property
    def satisfied(self) -> bool:
        return self.passed


@dataclass(frozen=True)
class StructuralOutcome:
    clause_id: str
    severity: float
    penalty: float = 1.0
    violated: bool | None = None

    def __post_init__(self):
        for name in ("severity", "penalty"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise MetricError(f"{name} must lie in [0, 1], got {v}")
        if self.violated is None:
            object.__setattr__(self, "violated", self.severity > 0)
        if not self.violated and self.severity != 0:
            raise MetricError("severity must be 0 when the check is not violated")

    @property
    def satisfied(self) -> bool:
        return not self.violated


@dataclass(frozen=True)
class VerifyOutcome:
    clause_id: str
    holds: bool

    @property
    def satisfied(self) -> bool:
        return self.holds


Outcome = TestOutcome | StructuralOutcome | VerifyOutcome


@dataclass(frozen=True)
class LogTrace:
    """Piecewise-linear anomaly level over ``[0, horizon]``."""

    horizon: float
    samples: tuple[tuple[float, float], ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple((float(t), float(a)) for t, a in self.samples))
        if not self.horizon > 0:
            raise MetricError(f"trace horizon must be > 0, got {self.horizon}")
        s = self.samples
        if len(s) < 2:
            raise MetricError("trace needs at least two samples")
        if s[0][0] != 0.0 or s[-1][0] != self.horizon:
            raise MetricError("trace must start at time 0 and end at the horizon")
        for (t0, _), (t1, _) in zip(s, s[1:]):
            if not t1 > t0:
                raise MetricError("sample times must be strictly increasing")
        for _, a in s:
            if not 0.0 <= a <= 1.0:
                raise MetricError(f"anomaly level {a} outside [0, 1]")

    @classmethod
    def quiet(cls, horizon: float = 1.0) -> "LogTrace":
        return cls(horizon, ((0.0, 0.0), (horizon, 0.0)))

    def to_dict(self) -> dict:
        return {"horizon": self.horizon, "samples": [list(p) for p in self.samples]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LogTrace":
        return cls(float(d["horizon"]), tuple(tuple(p) for p in d["samples"]))


@dataclass(frozen=True)
class ErrorWeights:
    alpha_test: float = 1.0
    alpha_struct: float = 1.0
    alpha_verify: float = 1.0
    alpha_logs: float = 1.0

    def __post_init__(self):
        for ch in CHANNELS:
            if not self[ch] > 0:
                raise MetricError(f"alpha_{ch} must be > 0")

    def __getitem__(self, channel: str) -> float:
        return getattr(self, f"alpha_{channel}")


@dataclass(frozen=True)
class FeedbackVector:
    e_test: float = 0.0
    e_struct: float = 0.0
    e_verify: float = 0.0
    e_logs: float = 0.0

    def __post_init__(self):
        for ch in CHANNELS:
            v = self[ch]
            if not 0.0 <= v <= 1.0:
                raise MetricError(f"e_{ch}={v} outside [0, 1]")

    def __getitem__(self, channel: str) -> float:
        return getattr(self, f"e_{channel}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.e_test, self.e_struct, self.e_verify, self.e_logs)

    def to_dict(self) -> dict:
        return {f"e_{ch}": self[ch] for ch in CHANNELS}


def _match(outcomes: Sequence, clauses: Sequence[SpecClause], kind: str) -> list:
    if not clauses:
        raise EmptyChannel(f"no {kind} clauses")
    by_id = {}
    for o in outcomes:
        if o.clause_id in by_id:
            raise MetricError(f"duplicate outcome for clause {o.clause_id!r}")
        by_id[o.clause_id] = o
    if set(by_id) != {c.id for c in clauses}:
        raise MetricError(f"{kind} outcomes do not match the {kind} clauses of the spec")
    return [(c.weight, by_id[c.id]) for c in clauses]


def _clamp01(x: float) -> float:
    # guards against 1.0000000000000002 from float summation
    return min(1.0, max(0.0, x))


def compute_mu(outcomes: Mapping[str, bool], spec: Specification) -> float:
    """Fraction of specification clauses the candidate satisfies."""
    if set(outcomes) != set(spec.ids) or not spec.clauses:
        raise MetricError("need exactly one satisfaction flag per clause")
    return sum(1 for c in spec.clauses if outcomes[c.id]) / len(spec.clauses)


def compute_test_error(outcomes: Sequence[TestOutcome], spec: Specification) -> float:
    pairs = _match(outcomes, spec.of_kind("test"), "test")
    return _clamp01(sum(w for w, o in pairs if not o.passed) / sum(w for w, _ in pairs))


def compute_struct_error(outcomes: Sequence[StructuralOutcome], spec: Specification) -> float:
    pairs = _match(outcomes, spec.of_kind("structural"), "structural")
    return _clamp01(sum(w * o.severity * o.penalty for w, o in pairs) / sum(w for w, _ in pairs))


def compute_verify_error(outcomes: Sequence[VerifyOutcome], spec: Specification) -> float:
    pairs = _match(outcomes, spec.of_kind("verify"), "verify")
    return _clamp01(sum(w for w, o in pairs if not o.holds) / sum(w for w, _ in pairs))


def compute_log_error(trace: LogTrace) -> float:
    """Time-averaged anomaly level; trapezoid rule, exact for the interpolant."""
    if not trace.horizon > 0:
        raise MetricError("invalid trace horizon")
    area = 0.0
    for (t0, a0), (t1, a1) in zip(trace.samples, trace.samples[1:]):
        area += 0.5 * (a0 + a1) * (t1 - t0)
    return _clamp01(area / trace.horizon)


def compute_log_error_many(traces: Sequence[LogTrace]) -> float:
    """Log error of several traces laid end to end on one timeline."""
    if not traces:
        raise EmptyChannel("no log traces")
    total = sum(tr.horizon for tr in traces)
    return _clamp01(sum(compute_log_error(tr) * tr.horizon for tr in traces) / total)


def aggregate_delta(f: FeedbackVector, w: ErrorWeights, present_channels: Iterable[str]) -> float:
    """Alpha-weighted mean of the present channel errors, in [0, 1]."""
    present = [ch for ch in CHANNELS if ch in set(present_channels)]
    if not present:
        raise MetricError("no channel carries signal")
    num = sum(w[ch] * f[ch] for ch in present)
    den = sum(w[ch] for ch in present)
    return _clamp01(num / den)


def evaluate(
    spec: Specification,
    outcomes: Sequence[Outcome],
    traces: LogTrace | Sequence[LogTrace] | None,
    weights: ErrorWeights,
) -> tuple[FeedbackVector, float, float, tuple[str, ...]]:
    """Compute (feedback, delta, mu, present channels) from raw outcomes.

    Channels with no clauses (and the log channel when no traces are given)
    are reported as 0 in the feedback vector but excluded from ``delta``.
    """
    by_kind: dict[str, list] = {k: [] for k in CLAUSE_KINDS}
    for o in outcomes:
        kind = spec.get(o.clause_id).kind
        by_kind[kind].append(o)
    values = dict.fromkeys(CHANNELS, 0.0)
    present = []
    for kind, fn in (("test", compute_test_error), ("structural", compute_struct_error),
                     ("verify", compute_verify_error)):
        try:
            values[_KIND_CHANNEL[kind]] = fn(by_kind[kind], spec)
        except EmptyChannel:
            continue
        present.append(_KIND_CHANNEL[kind])
    if isinstance(traces, LogTrace):
        traces = [traces]
    if traces:
        values["logs"] = compute_log_error_many(traces)
        present.append("logs")
    fb = FeedbackVector(*(values[ch] for ch in CHANNELS))
    delta = aggregate_delta(fb, weights, present)
    mu = compute_mu({o.clause_id: o.satisfied for o in outcomes}, spec)
    return fb, delta, mu, tuple(present)
