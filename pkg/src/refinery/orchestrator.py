"""The refinement loop: select, propose, verify, reweight, record.

One coordinator owns the specification, the candidate distribution and the
records. Verification and proposal generation are the only fan-out points.

Run directory layout (when ``run_dir`` is given)::

    records.jsonl   one IterationRecord per line, append-only
    history.jsonl   context items, append-only
    cache.jsonl     verification cache
    state.json      coordinator checkpoint after the last finished iteration
    report.json     final result, written when the run terminates
    work/           per-candidate working directories (transient)
"""

from __future__ import annotations

import json
import logging
import os
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .context import (
    ContextItem,
    ContextQuery,
    HistoryStore,
    ScoringWeights,
    render_bundle,
    select_context,
)
from .distribution import (
    CandidateDistribution,
    SearchConfig,
    admit_candidates,
    gibbs_update,
    select_pool,
)
from .generator import GeneratorUnavailable, ProposalRequest, validate_proposal
from .hypothesis import ArtifactSnapshot, Candidate, MaterializationError, materialize
from .metrics import ErrorWeights, MetricError, SpecClause, Specification
from .verification import ChannelRunner, VerificationCache, VerificationReport, Verifier

logger = logging.getLogger(__name__)

RECORDS = "records.jsonl"
STATE = "state.json"
HISTORY = "history.jsonl"
CACHE = "cache.jsonl"
REPORT = "report.json"

_CHANNEL_ORIGIN = {"test": "test_failure", "structural": "structural_finding",
                   "verify": "verify_finding"}


class RunAborted(Exception):
    """Unrecoverable failure; records written so far are kept."""


class ResumeError(Exception):
    pass


@dataclass(frozen=True)
class Termination:
    delta_threshold: float = 0.0
    max_iterations: int = 50
    stall_window: int = 20

    def __post_init__(self):
        if not 0.0 <= self.delta_threshold <= 1.0:
            raise ValueError("delta_threshold must lie in [0, 1]")
        if self.max_iterations < 1 or self.stall_window < 1:
            raise ValueError("max_iterations and stall_window must be positive")


@dataclass(frozen=True)
class RunConfig:
    weights: ErrorWeights = field(default_factory=ErrorWeights)
    search: SearchConfig = field(default_factory=SearchConfig)
    scoring: ScoringWeights = field(default_factory=ScoringWeights)
    budget: int = 4000
    recency: int = 3
    worker_count: int = 1
    termination: Termination = field(default_factory=Termination)
    seed: int = 0
    history_cap: int = 20
    high_severity_weight: float = 2.0

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("budget must be >= 0")
        if self.recency < 0:
            raise ValueError("recency must be >= 0")
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        if self.history_cap < 0:
            raise ValueError("history_cap must be >= 0")


@dataclass(frozen=True)
class DemandEvent:
    at_iteration: int
    new_clauses: tuple[SpecClause, ...] = ()
    runners: tuple[ChannelRunner, ...] = ()

    def __post_init__(self):
        if self.at_iteration < 1:
            raise ValueError("demand events start at iteration 1")
        object.__setattr__(self, "new_clauses", tuple(self.new_clauses))
        object.__setattr__(self, "runners", tuple(self.runners))


@dataclass
class IterationRecord:
    t: int
    spec_version: int
    pool: list[str]
    deltas: dict[str, float]
    mus: dict[str, float]
    feedback: dict[str, list[float]]
    distribution: dict[str, list]
    best_delta: float
    incumbent: str
    proposals: int
    cache_hits: int
    evaluations: int
    wall_time: float = 0.0
    termination: str | None = None

    def to_dict(self, timing: bool = True) -> dict:
        d = dict(self.__dict__)
        if not timing:
            d.pop("wall_time")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IterationRecord":
        return cls(**d)


@dataclass
class RunResult:
    final_candidate: Candidate
    final_delta: float
    final_mu: float
    records: list[IterationRecord]
    termination: str
    spec: Specification

    @property
    def iterations(self) -> int:
        return self.records[-1].t if self.records else 0

    def summary(self) -> dict:
        return {"final_candidate": self.final_candidate.to_dict(),
                "final_delta": self.final_delta, "final_mu": self.final_mu,
                "termination": self.termination, "iterations": self.iterations,
                "spec": self.spec.to_dict()}


def extend_spec(spec: Specification, new_clauses: Sequence[SpecClause]) -> Specification:
    """Append clauses and bump the version. Duplicate ids are rejected."""
    taken = set(spec.ids)
    for c in new_clauses:
        if c.id in taken:
            raise MetricError(f"clause id {c.id!r} already in use")
        taken.add(c.id)
    return spec.extended(new_clauses)


def spec_digest(spec: Specification) -> str:
    return "\n".join(f"- [{c.kind}] {c.id} (weight {c.weight:g}): {c.description}".rstrip(": ")
                     for c in spec.clauses)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _seed(*parts: int) -> list[int]:
    return [int(p) & 0xFFFFFFFF for p in parts]


class Refiner:
    """Coordinator state plus the loop body. Use :func:`run` / :func:`resume`."""

    def __init__(
        self,
        base: ArtifactSnapshot,
        spec: Specification,
        runners: Sequence[ChannelRunner],
        generator,
        cfg: RunConfig,
        demands: Sequence[DemandEvent] = (),
        run_dir: str | Path | None = None,
        on_iteration: Callable[[IterationRecord], None] | None = None,
    ):
        if not spec.clauses:
            raise ValueError("specification needs at least one clause")
        self.base = base
        self.base_id = base.digest()
        self.initial_spec = spec
        self.spec = spec
        self.generator = generator
        self.cfg = cfg
        self.demands = sorted(demands, key=lambda d: d.at_iteration)
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.on_iteration = on_iteration
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        self.verifier = Verifier(
            base, runners, cfg.weights, cfg.worker_count,
            VerificationCache(self._path(CACHE)),
            workroot=(self.run_dir / "work") if self.run_dir is not None else None)
        self.history = HistoryStore(self._path(HISTORY))
        self.records: list[IterationRecord] = []

        self.t = 0
        self.applied_demands = 0
        self.c0 = Candidate.create(self.base_id)
        self.candidates: dict[str, Candidate] = {self.c0.id: self.c0}
        self.dist = CandidateDistribution.point(self.c0.id)
        # last evaluation per candidate: (delta, mu, spec version)
        self.known: dict[str, tuple[float, float, int]] = {}
        self.best = float("inf")
        self.last_improvement = 0
        self.failure_counts: Counter[str] = Counter()
        self.termination: str | None = None

    def _path(self, name: str) -> Path | None:
        return self.run_dir / name if self.run_dir is not None else None

    # -- state -------------------------------------------------------------

    def _state(self) -> dict:
        return {
            "t": self.t,
            "spec": self.spec.to_dict(),
            "applied_demands": self.applied_demands,
            "candidates": [c.to_dict() for c in self.candidates.values()],
            "distribution": {"entries": dict(self.dist.entries),
                             "iteration": self.dist.iteration},
            "known": {k: list(v) for k, v in self.known.items()},
            "best": self.best if self.best != float("inf") else None,
            "last_improvement": self.last_improvement,
            "failure_counts": dict(self.failure_counts),
            "history_len": len(self.history),
            "records": len(self.records),
            "termination": self.termination,
        }

    def _load_state(self, st: dict) -> None:
        self.t = int(st["t"])
        self.applied_demands = int(st["applied_demands"])
        for ev in self.demands[: self.applied_demands]:
            self.verifier.add_runners(ev.runners)
        self.spec = Specification.from_dict(st["spec"])
        self.candidates = {d["id"]: Candidate.from_dict(d) for d in st["candidates"]}
        self.dist = CandidateDistribution(st["distribution"]["entries"],
                                          st["distribution"]["iteration"])
        self.known = {k: (float(v[0]), float(v[1]), int(v[2])) for k, v in st["known"].items()}
        self.best = float("inf") if st["best"] is None else float(st["best"])
        self.last_improvement = int(st["last_improvement"])
        self.failure_counts = Counter(st["failure_counts"])
        self.termination = st["termination"]

    def _checkpoint(self, record: IterationRecord) -> None:
        if self.run_dir is None:
            return
        with self._path(RECORDS).open("a") as fh:
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
        _atomic_write(self._path(STATE), json.dumps(self._state(), sort_keys=True))

    # -- loop pieces -------------------------------------------------------

    def _incumbent(self) -> str:
        fresh = [(d, cid) for cid, (d, _, v) in self.known.items() if v == self.spec.version]
        if fresh:
            return min(fresh)[1]
        if self.known:
            return min((d, cid) for cid, (d, _, _) in self.known.items())[1]
        return self.c0.id

    def _pending_demands(self) -> bool:
        return self.applied_demands < len(self.demands)

    def _apply_demands(self, t: int) -> None:
        while self._pending_demands() and self.demands[self.applied_demands].at_iteration <= t:
            ev = self.demands[self.applied_demands]
            self.spec = extend_spec(self.spec, ev.new_clauses)
            self.verifier.add_runners(ev.runners)
            self.applied_demands += 1
            # every tracked delta is now stale; fresh values come from the next pool
            self.best = float("inf")
            self.last_improvement = t
            logger.info("t=%d: spec extended to version %d (+%d clauses)", t,
                        self.spec.version, len(ev.new_clauses))

    def _verify(self, ids: Sequence[str]) -> dict[str, VerificationReport]:
        reports = {}
        for cid in ids:
            rep = self.verifier.verify(self.candidates[cid], self.spec)
            reports[cid] = rep
            self.known[cid] = (rep.delta, rep.mu, self.spec.version)
        return reports

    def _propose(self, t: int, survivors: list[str]) -> list[str]:
        n = self.cfg.search.pool_size - len(survivors)
        if n <= 0:
            return []
        rng = np.random.default_rng(_seed(self.cfg.seed, t, 1))
        mass = np.array([self.dist[c] for c in survivors], dtype=float)
        if mass.sum() <= 0:
            mass = np.ones(len(survivors))
        parents = Counter(survivors[i] for i in rng.choice(len(survivors), size=n,
                                                           p=mass / mass.sum()))
        bundle = select_context(self.history.snapshot(), self.cfg.scoring, self.cfg.budget,
                                ContextQuery(), current_iteration=t, recency=self.cfg.recency)
        rendered = render_bundle(bundle, self.history)
        digest = spec_digest(self.spec)
        fresh: list[str] = []
        for k, parent_id in enumerate(sorted(parents)):
            parent = self.candidates[parent_id]
            try:
                snap = materialize(self.base, parent)
            except MaterializationError:
                continue
            req = ProposalRequest(parent_id, snap, rendered, digest, parents[parent_id],
                                  seed=int(np.random.SeedSequence(_seed(self.cfg.seed, t, 2, k))
                                           .generate_state(1)[0]))
            try:
                proposals = self.generator.propose(req)
            except GeneratorUnavailable as exc:
                logger.warning("t=%d: generator unavailable (%s); keeping current pool", t, exc)
                continue
            for p in proposals[: req.n]:
                target = self.base if p.absolute else snap
                verdict = validate_proposal(p, target)
                if not verdict.accepted:
                    self._note(t, f"rejected proposal ({verdict.reason}): {p.rationale}")
                    continue
                edits = p.edits if p.absolute else parent.edits + p.edits
                cand = Candidate.create(self.base_id, edits, parent_id, t)
                if cand.id not in self.candidates:
                    self.candidates[cand.id] = cand
                if cand.id not in fresh and cand.id not in survivors:
                    fresh.append(cand.id)
        for note in getattr(self.generator, "notes", [])[:]:
            self._note(t, note)
        if hasattr(self.generator, "notes"):
            self.generator.notes.clear()
        return fresh

    def _note(self, t: int, text: str) -> None:
        if self.cfg.history_cap:
            self.history.append(ContextItem(self.history.next_id(), text, "prior_feedback", t))

    def _record_history(self, t: int, pool: list[str],
                        reports: dict[str, VerificationReport]) -> None:
        cap = self.cfg.history_cap
        if not cap:
            return
        added = 0
        for cid in pool:
            rep = reports[cid]
            items = []
            for o in rep.outcomes:
                if o.satisfied:
                    continue
                clause = self.spec.get(o.clause_id)
                self.failure_counts[o.clause_id] += 1
                sev = getattr(o, "severity", 1.0)
                items.append(ContextItem(
                    "", f"candidate {cid[:12]} fails {clause.kind} clause {clause.id}: "
                        f"{clause.description}".rstrip(": "),
                    _CHANNEL_ORIGIN[clause.kind], t,
                    "high" if clause.weight >= self.cfg.high_severity_weight else "low",
                    self.failure_counts[o.clause_id],
                    float(sev) if clause.kind == "structural" else 0.0))
            for runner_id, trace in sorted(rep.log_traces.items()):
                if any(a > 0 for _, a in trace.samples):
                    items.append(ContextItem(
                        "", f"candidate {cid[:12]}: anomalies in {runner_id}", "log_excerpt", t,
                        anomalous_logs=True))
            for f in rep.findings:
                items.append(ContextItem("", f["text"] or "runner failure", "log_excerpt", t,
                                         anomalous_logs=True))
            for item in items:
                if added >= cap:
                    return
                self.history.append(replace(item, id=self.history.next_id()))
                added += 1

    def step(self) -> IterationRecord:
        t0 = time.perf_counter()
        t = self.t + 1
        self._apply_demands(t)
        incumbent = self._incumbent()
        search = self.cfg.search
        survivors = select_pool(self.dist, search, _seed(self.cfg.seed, t, 0), incumbent,
                                size=min(search.survivor_count, len(self.dist)))
        reports = self._verify(survivors)
        best_now = min(r.delta for r in reports.values())
        solved = best_now <= self.cfg.termination.delta_threshold

        newcomers: list[str] = []
        if not solved:
            newcomers = self._propose(t, survivors)
            reports.update(self._verify(newcomers))
        pool = survivors + newcomers
        untracked = [c for c in newcomers if c not in self.dist]
        self.dist = admit_candidates(self.dist, untracked, search)
        stale = {cid: v[0] for cid, v in self.known.items() if cid not in reports}
        self.dist = gibbs_update(self.dist, {c: reports[c].delta for c in pool}, search.lam,
                                 stale)
        self._record_history(t, pool, reports)

        pool_best = min(reports[c].delta for c in pool)
        if pool_best < self.best:
            self.best = pool_best
            self.last_improvement = t
        incumbent = self._incumbent()
        self.t = t
        self.termination = self._check_termination(t)
        record = IterationRecord(
            t=t, spec_version=self.spec.version, pool=pool,
            deltas={c: reports[c].delta for c in pool},
            mus={c: reports[c].mu for c in pool},
            feedback={c: list(reports[c].feedback.as_tuple()) for c in pool},
            distribution={c: [m, self.known[c][0] if c in self.known else None]
                          for c, m in sorted(self.dist.entries.items())},
            best_delta=self.best, incumbent=incumbent, proposals=len(newcomers),
            cache_hits=sum(r.cache_hits for r in reports.values()),
            evaluations=sum(len(r.outcomes) + len(r.log_traces) for r in reports.values()),
            wall_time=time.perf_counter() - t0, termination=self.termination)
        self.records.append(record)
        self._checkpoint(record)
        if self.on_iteration is not None:
            self.on_iteration(record)
        return record

    def _check_termination(self, t: int) -> str | None:
        term = self.cfg.termination
        if self.best <= term.delta_threshold and not self._pending_demands():
            return "success"
        if t >= term.max_iterations:
            return "budget"
        if self.best > term.delta_threshold and t - self.last_improvement >= term.stall_window:
            return "stall"
        return None

    def result(self) -> RunResult:
        inc = self._incumbent()
        delta, mu, _ = self.known.get(inc, (1.0, 0.0, self.spec.version))
        return RunResult(self.candidates[inc], delta, mu, list(self.records),
                         self.termination or "interrupted", self.spec)

    def loop(self, stop_after: int | None = None) -> RunResult:
        while self.termination is None:
            if stop_after is not None and self.t >= stop_after:
                return self.result()
            self.step()
        result = self.result()
        if self.run_dir is not None:
            _atomic_write(self._path(REPORT), json.dumps(result.summary(), sort_keys=True,
                                                         indent=2))
        return result


def run(
    base: ArtifactSnapshot,
    spec: Specification,
    runners: Sequence[ChannelRunner],
    generator,
    cfg: RunConfig,
    demands: Sequence[DemandEvent] = (),
    run_dir: str | Path | None = None,
    stop_after: int | None = None,
    on_iteration: Callable[[IterationRecord], None] | None = None,
) -> RunResult:
    """Drive the loop to termination (or until ``stop_after`` iterations)."""
    if run_dir is not None and Path(run_dir, RECORDS).exists():
        raise RunAborted(f"{run_dir} already holds a run; use resume")
    ref = Refiner(base, spec, runners, generator, cfg, demands, run_dir, on_iteration)
    try:
        ref.verifier.check_coverage(spec)
    except Exception as exc:
        raise RunAborted(str(exc)) from exc
    return ref.loop(stop_after)


def load_records(run_dir: str | Path) -> list[IterationRecord]:
    path = Path(run_dir, RECORDS)
    if not path.exists():
        raise ResumeError(f"{run_dir}: no iteration records")
    text = path.read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    elif lines:
        lines.pop()  # unterminated tail: an append was interrupted
    out = []
    for i, line in enumerate(lines, 1):
        try:
            out.append(IterationRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ResumeError(f"{path}:{i}: corrupt record ({exc})") from exc
    for a, b in zip(out, out[1:]):
        if b.t != a.t + 1:
            raise ResumeError(f"{path}: records out of sequence at t={b.t}")
    return out


def resume(
    run_dir: str | Path,
    base: ArtifactSnapshot,
    spec: Specification,
    runners: Sequence[ChannelRunner],
    generator,
    cfg: RunConfig,
    demands: Sequence[DemandEvent] = (),
    stop_after: int | None = None,
    on_iteration: Callable[[IterationRecord], None] | None = None,
) -> RunResult:
    """Continue a run from its last checkpoint.

    ``base``/``spec``/``runners``/``generator``/``cfg``/``demands`` must
    describe the original run (the CLI rebuilds them from the config
    snapshot). A finished run is returned as stored.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ResumeError(f"{run_dir}: not a run directory")
    state_path = run_dir / STATE
    if not state_path.exists():
        raise ResumeError(f"{run_dir}: no checkpoint to resume from")
    try:
        st = json.loads(state_path.read_text())
    except json.JSONDecodeError as exc:
        raise ResumeError(f"{state_path}: corrupt checkpoint") from exc
    records = load_records(run_dir)
    if len(records) < st["records"] or (records and records[st["records"] - 1].t != st["t"]):
        raise ResumeError(f"{run_dir}: checkpoint and records disagree")
    ref = Refiner(base, spec, runners, generator, cfg, demands, run_dir, on_iteration)
    if ref.c0.id not in {c["id"] for c in st["candidates"]}:
        raise ResumeError(f"{run_dir}: base artifact differs from the recorded run")
    if len(records) > st["records"]:
        records = records[: st["records"]]
        (run_dir / RECORDS).write_text("".join(json.dumps(r.to_dict(), sort_keys=True) + "\n"
                                               for r in records))
    if len(ref.history) > st["history_len"]:
        ref.history.truncate(st["history_len"])
    ref._load_state(st)
    ref.records = records
    if ref.termination is not None:
        report = run_dir / REPORT
        if not report.exists():
            _atomic_write(report, json.dumps(ref.result().summary(), sort_keys=True, indent=2))
        return ref.result()
    return ref.loop(stop_after)
