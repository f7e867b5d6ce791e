"""Composite verification oracle: runs every channel for a candidate.

Runner protocol
---------------
* ``exit_code``      exit status 0 means pass.
* ``severity_json``  one JSON object ``{"severity": s, "penalty": q}`` on stdout.
* ``trace_json``     newline-delimited ``{"time": t, "level": a}`` records on stdout.

A runner either shells out (``command``; the token ``{workdir}`` is replaced
by the runner's private working directory, which is also its cwd), calls a
registered builtin check, or calls an in-process ``check`` callable.
Builtins and callables receive the materialized snapshot.

Runners whose parser is ``trace_json`` feed the log channel and are not
tied to a specification clause. Everything else maps onto exactly one
clause. Results of deterministic runners are cached by
(snapshot hash, clause id, clause-definition hash); the cache assumes the
runners are deterministic and does not try to detect otherwise.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import shutil
import subprocess
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .hypothesis import ArtifactSnapshot, Candidate, MaterializationError, materialize
from .metrics import (
    ErrorWeights,
    FeedbackVector,
    LogTrace,
    MetricError,
    Outcome,
    Specification,
    StructuralOutcome,
    TestOutcome,
    VerifyOutcome,
    evaluate,
)

logger = logging.getLogger(__name__)

PARSERS = ("exit_code", "severity_json", "trace_json")
DEFAULT_ANOMALY_PATTERNS = (r"(?i)\berror\b", r"(?i)\bexception\b", r"(?i)traceback",
                            r"(?i)\bwarn(ing)?\b", r"(?i)\bfatal\b")
EXCERPT_CHARS = 2000

BUILTIN_CHECKS: dict[str, Callable[[ArtifactSnapshot, str | None], Any]] = {}


class VerificationError(Exception):
    pass


def builtin(name: str):
    def register(fn):
        BUILTIN_CHECKS[name] = fn
        return fn
    return register


@builtin("python_compiles")
def _python_compiles(snapshot: ArtifactSnapshot, arg: str | None) -> dict:
    sources = [p for p in sorted(snapshot.files) if p.endswith(".py")]
    if not sources:
        return {"severity": 0.0, "penalty": 1.0}
    bad = 0
    for path in sources:
        try:
            compile(snapshot.files[path], path, "exec")
        except (SyntaxError, ValueError):
            bad += 1
    return {"severity": bad / len(sources), "penalty": 1.0}


@builtin("line_length")
def _line_length(snapshot: ArtifactSnapshot, arg: str | None) -> dict:
    limit = int(arg or 100)
    total = over = 0
    for path in sorted(snapshot.files):
        try:
            lines = snapshot.files[path].decode("utf-8").splitlines()
        except UnicodeDecodeError:
            continue
        total += len(lines)
        over += sum(len(line) > limit for line in lines)
    return {"severity": over / total if total else 0.0, "penalty": 1.0}


@dataclass(frozen=True)
class ChannelRunner:
    clause_id: str
    parser: str = "exit_code"
    command: tuple[str, ...] | None = None
    builtin: str | None = None
    timeout: float = 60.0
    definition: str = ""
    check: Callable[[ArtifactSnapshot], Any] | None = field(default=None, compare=False,
                                                           repr=False)

    def __post_init__(self):
        if self.parser not in PARSERS:
            raise VerificationError(f"{self.clause_id}: unknown parser {self.parser!r}")
        if not self.timeout > 0:
            raise VerificationError(f"{self.clause_id}: timeout must be > 0")
        sources = sum(x is not None for x in (self.command, self.builtin, self.check))
        if sources != 1:
            raise VerificationError(
                f"{self.clause_id}: exactly one of command, builtin, check is required")
        if self.command is not None:
            object.__setattr__(self, "command", tuple(str(a) for a in self.command))
        if self.builtin is not None and self.builtin.split(":", 1)[0] not in BUILTIN_CHECKS:
            raise VerificationError(f"{self.clause_id}: unknown builtin {self.builtin!r}")

    @property
    def is_log(self) -> bool:
        return self.parser == "trace_json"

    def identity(self) -> dict:
        return {"clause_id": self.clause_id, "parser": self.parser,
                "command": list(self.command) if self.command else None,
                "builtin": self.builtin, "definition": self.definition}

    def to_dict(self) -> dict:
        d = self.identity()
        d["timeout"] = self.timeout
        return d


def definition_hash(runner: ChannelRunner, spec: Specification) -> str:
    payload = {"runner": runner.identity()}
    if not runner.is_log:
        payload["clause"] = spec.get(runner.clause_id).to_dict()
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def cache_key(snapshot_hash: str, clause_id: str, def_hash: str) -> str:
    h = hashlib.sha256()
    for part in (snapshot_hash, clause_id, def_hash):
        h.update(part.encode())
        h.update(b"\0")
    return h.hexdigest()


class VerificationCache:
    """Outcome cache keyed by hex CacheKey; optionally persisted as JSON lines.

    Reads are lock-free dict lookups; writes are serialized.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, dict] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for line in self.path.read_text().splitlines():
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    continue  # torn tail from an interrupted append
                if rec.get("evict"):
                    self._entries.pop(rec["key"], None)
                else:
                    self._entries[rec["key"]] = rec

    def get(self, key: str) -> dict | None:
        return self._entries.get(key)

    def put(self, key: str, clause_id: str, result: dict) -> None:
        rec = {"key": key, "clause_id": clause_id, "result": result}
        with self._lock:
            self._entries[key] = rec
            self._append([rec])

    def _append(self, recs: list[dict]) -> None:
        if self.path is None or not recs:
            return
        with self.path.open("a") as fh:
            for rec in recs:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def invalidate(self, clause_ids: Iterable[str]) -> int:
        wanted = set(clause_ids)
        with self._lock:
            doomed = [k for k, rec in self._entries.items() if rec["clause_id"] in wanted]
            for k in doomed:
                del self._entries[k]
            self._append([{"key": k, "evict": True} for k in doomed])
        return len(doomed)

    def __len__(self):
        return len(self._entries)


def invalidate(cache: VerificationCache, clause_ids: Iterable[str]) -> int:
    return cache.invalidate(clause_ids)


@dataclass
class VerificationReport:
    candidate_id: str
    outcomes: list[Outcome]
    log_traces: dict[str, LogTrace]
    feedback: FeedbackVector
    delta: float
    mu: float
    present_channels: tuple[str, ...]
    feasible: bool = True
    cache_hits: int = 0
    executed: int = 0
    wall_time: float = 0.0
    findings: list[dict] = field(default_factory=list)

    def to_dict(self, timing: bool = False) -> dict:
        d = {
            "candidate_id": self.candidate_id,
            "feasible": self.feasible,
            "outcomes": [_outcome_to_dict(o) for o in self.outcomes],
            "log_traces": {k: v.to_dict() for k, v in sorted(self.log_traces.items())},
            "feedback": self.feedback.to_dict(),
            "delta": self.delta,
            "mu": self.mu,
            "present_channels": list(self.present_channels),
            "cache_hits": self.cache_hits,
            "findings": self.findings,
        }
        if timing:
            d["wall_time"] = self.wall_time
            d["executed"] = self.executed
        return d

    def canonical(self) -> str:
        """Stable serialization without timing fields."""
        return json.dumps(self.to_dict(), sort_keys=True)


def _outcome_to_dict(o: Outcome) -> dict:
    if isinstance(o, TestOutcome):
        return {"clause_id": o.clause_id, "kind": "test", "passed": o.passed}
    if isinstance(o, VerifyOutcome):
        return {"clause_id": o.clause_id, "kind": "verify", "holds": o.holds}
    return {"clause_id": o.clause_id, "kind": "structural", "severity": o.severity,
            "penalty": o.penalty, "violated": o.violated}


def _outcome_from_result(kind: str, clause_id: str, result: dict) -> Outcome:
    if kind == "test":
        return TestOutcome(clause_id, bool(result["ok"]))
    if kind == "verify":
        return VerifyOutcome(clause_id, bool(result["ok"]))
    sev = float(result["severity"])
    return StructuralOutcome(clause_id, sev, float(result["penalty"]), sev > 0)


def parse_trace_records(text: str) -> LogTrace | None:
    """Build a trace from ``{"time", "level"}`` lines; None when there are none."""
    points: dict[float, float] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line.startswith("{"):
            continue
        try:
            rec = json.loads(line)
            t, a = float(rec["time"]), float(rec["level"])
        except (ValueError, KeyError, TypeError):
            continue
        if t < 0:
            continue
        points[t] = min(1.0, max(0.0, a))
    if not points:
        return None
    times = sorted(points)
    samples = [(t, points[t]) for t in times]
    if samples[0][0] > 0:
        samples.insert(0, (0.0, samples[0][1]))
    if len(samples) == 1:
        return LogTrace(1.0, ((0.0, samples[0][1]), (1.0, samples[0][1])))
    return LogTrace(samples[-1][0], tuple(samples))


def trace_from_lines(text: str, patterns: Sequence[str] = DEFAULT_ANOMALY_PATTERNS) -> LogTrace:
    """Fallback for uninstrumented output: line i spans [i, i+1]; level 1 on matches."""
    lines = text.splitlines()
    if not lines:
        return LogTrace.quiet()
    compiled = [re.compile(p) for p in patterns]
    levels = [1.0 if any(c.search(line) for c in compiled) else 0.0 for line in lines]
    samples = [(0.0, levels[0])]
    samples += [(i + 0.5, lvl) for i, lvl in enumerate(levels)]
    samples.append((float(len(lines)), levels[-1]))
    return LogTrace(float(len(lines)), tuple(samples))


@dataclass
class _RunResult:
    result: dict | None  # parsed, cacheable
    failed_hard: bool = False  # timeout or crash
    reason: str = ""
    excerpt: str = ""


def _interpret(parser: str, kind: str, raw: Any) -> dict:
    """Normalize a builtin/callable return value into a cacheable result."""
    if parser == "trace_json":
        if isinstance(raw, LogTrace):
            return {"trace": raw.to_dict()}
        trace = parse_trace_records(str(raw or ""))
        return {"trace": (trace or LogTrace.quiet()).to_dict()}
    if isinstance(raw, Mapping):
        sev = min(1.0, max(0.0, float(raw["severity"])))
        pen = min(1.0, max(0.0, float(raw.get("penalty", 1.0))))
        if kind == "structural":
            return {"severity": sev, "penalty": pen}
        return {"ok": sev == 0}
    if isinstance(raw, tuple):
        sev = min(1.0, max(0.0, float(raw[0])))
        pen = min(1.0, max(0.0, float(raw[1]))) if len(raw) > 1 else 1.0
        return {"severity": sev, "penalty": pen} if kind == "structural" else {"ok": sev == 0}
    ok = bool(raw)
    if kind == "structural":
        return {"severity": 0.0 if ok else 1.0, "penalty": 1.0}
    return {"ok": ok}


def _hard_failure(kind: str | None) -> dict:
    if kind is None:
        return {"trace": LogTrace(1.0, ((0.0, 1.0), (1.0, 1.0))).to_dict()}
    if kind == "structural":
        return {"severity": 1.0, "penalty": 1.0}
    return {"ok": False}


class Verifier:
    """Runs channel runners through a bounded worker pool with caching.

    ``invocations`` counts real (non-cached) executions per runner id.
    """

    def __init__(
        self,
        base: ArtifactSnapshot,
        runners: Sequence[ChannelRunner],
        weights: ErrorWeights | None = None,
        worker_count: int = 1,
        cache: VerificationCache | None = None,
        workroot: str | Path | None = None,
        anomaly_patterns: Sequence[str] = DEFAULT_ANOMALY_PATTERNS,
    ):
        ids = [r.clause_id for r in runners]
        if len(set(ids)) != len(ids):
            raise VerificationError("duplicate runner ids")
        self.base = base
        self.runners = {r.clause_id: r for r in runners}
        self.weights = weights or ErrorWeights()
        self.worker_count = max(1, int(worker_count))
        self.cache = cache if cache is not None else VerificationCache()
        self.workroot = Path(workroot) if workroot is not None else None
        self.anomaly_patterns = tuple(anomaly_patterns)
        self.invocations: dict[str, int] = {}
        self._count_lock = threading.Lock()

    def add_runners(self, runners: Iterable[ChannelRunner]) -> None:
        for r in runners:
            if r.clause_id in self.runners:
                raise VerificationError(f"duplicate runner id {r.clause_id!r}")
            self.runners[r.clause_id] = r

    def check_coverage(self, spec: Specification) -> None:
        missing = [c.id for c in spec.clauses if c.id not in self.runners]
        if missing:
            raise VerificationError(f"clauses without runners: {missing}")
        for c in spec.clauses:
            r = self.runners[c.id]
            if r.is_log:
                raise VerificationError(f"{c.id}: trace_json runner bound to a clause")
            if r.parser == "severity_json" and c.kind != "structural":
                raise VerificationError(f"{c.id}: severity_json needs a structural clause")

    def _log_runners(self, spec: Specification) -> list[ChannelRunner]:
        clause_ids = set(spec.ids)
        return [r for cid, r in sorted(self.runners.items())
                if r.is_log and cid not in clause_ids]

    def verify(self, candidate: Candidate, spec: Specification) -> VerificationReport:
        t0 = time.perf_counter()
        self.check_coverage(spec)
        try:
            snapshot = materialize(self.base, candidate)
        except MaterializationError as exc:
            logger.info("candidate %s is infeasible: %s", candidate.id[:12], exc)
            return VerificationReport(
                candidate.id, [], {}, FeedbackVector(1.0, 1.0, 1.0, 1.0), 1.0, 0.0, (),
                feasible=False, wall_time=time.perf_counter() - t0,
                findings=[{"origin": "log_excerpt", "clause_id": None,
                           "text": f"materialization failed: {exc}"}])
        snap_hash = snapshot.digest()
        jobs = sorted(spec.ids) + [r.clause_id for r in self._log_runners(spec)]
        kinds = {c.id: c.kind for c in spec.clauses}
        keys = {cid: cache_key(snap_hash, cid, definition_hash(self.runners[cid], spec))
                for cid in jobs}

        results: dict[str, _RunResult] = {}
        hits = 0
        todo = []
        for cid in jobs:
            rec = self.cache.get(keys[cid])
            if rec is not None:
                results[cid] = _RunResult(rec["result"])
                hits += 1
            else:
                todo.append(cid)

        def work(cid: str) -> tuple[str, _RunResult]:
            return cid, self._execute(self.runners[cid], kinds.get(cid), snapshot, candidate)

        if self.worker_count == 1 or len(todo) <= 1:
            done = [work(cid) for cid in todo]
        else:
            with ThreadPoolExecutor(max_workers=min(self.worker_count, len(todo))) as ex:
                done = list(ex.map(work, todo))
        if self.workroot is not None:
            shutil.rmtree(self.workroot / candidate.id, ignore_errors=True)
        for cid, res in done:
            results[cid] = res
            if not res.failed_hard:
                self.cache.put(keys[cid], cid, res.result)

        outcomes: list[Outcome] = []
        traces: dict[str, LogTrace] = {}
        findings = []
        for cid in jobs:  # deterministic merge order
            res = results[cid]
            kind = kinds.get(cid)
            result = res.result if not res.failed_hard else _hard_failure(kind)
            if kind is None:
                traces[cid] = LogTrace.from_dict(result["trace"])
            else:
                outcomes.append(_outcome_from_result(kind, cid, result))
            if res.failed_hard:
                findings.append({"origin": "log_excerpt", "clause_id": cid,
                                 "text": f"{cid}: {res.reason}\n{res.excerpt}".strip()})
        try:
            fb, delta, mu, present = evaluate(spec, outcomes, list(traces.values()) or None,
                                              self.weights)
        except MetricError as exc:
            raise VerificationError(str(exc)) from exc
        return VerificationReport(candidate.id, outcomes, traces, fb, delta, mu, present,
                                  cache_hits=hits, executed=len(todo),
                                  wall_time=time.perf_counter() - t0, findings=findings)

    def _execute(self, runner: ChannelRunner, kind: str | None, snapshot: ArtifactSnapshot,
                 candidate: Candidate) -> _RunResult:
        with self._count_lock:
            self.invocations[runner.clause_id] = self.invocations.get(runner.clause_id, 0) + 1
        if runner.command is None:
            try:
                if runner.check is not None:
                    raw = runner.check(snapshot)
                else:
                    name, _, arg = runner.builtin.partition(":")
                    raw = BUILTIN_CHECKS[name](snapshot, arg or None)
                return _RunResult(_interpret(runner.parser, kind, raw))
            except Exception as exc:  # a crashing check counts as a hard failure
                return _RunResult(None, True, "crashed", repr(exc))
        return self._execute_command(runner, kind, snapshot, candidate)

    def _execute_command(self, runner: ChannelRunner, kind: str | None,
                         snapshot: ArtifactSnapshot, candidate: Candidate) -> _RunResult:
        if self.workroot is None:
            with self._count_lock:
                if self.workroot is None:
                    self.workroot = Path(tempfile.mkdtemp(prefix="refinery-"))
        safe = re.sub(r"[^\w.-]", "_", runner.clause_id)
        workdir = snapshot.write_to(self.workroot / candidate.id / safe)
        argv = [a.replace("{workdir}", str(workdir)) for a in runner.command]
        try:
            proc = subprocess.run(argv, cwd=workdir, capture_output=True, text=True,
                                  timeout=runner.timeout)
        except subprocess.TimeoutExpired as exc:
            out = exc.stderr or b""
            if isinstance(out, bytes):
                out = out.decode("utf-8", "replace")
            return _RunResult(None, True, f"timed out after {runner.timeout}s",
                              out[-EXCERPT_CHARS:])
        except OSError as exc:
            return _RunResult(None, True, "crashed", str(exc))
        finally:
            shutil.rmtree(workdir, ignore_errors=True)
        excerpt = (proc.stderr or proc.stdout or "")[-EXCERPT_CHARS:]
        if proc.returncode < 0:
            return _RunResult(None, True, f"killed by signal {-proc.returncode}", excerpt)
        if runner.parser == "exit_code":
            ok = proc.returncode == 0
            if kind == "structural":
                return _RunResult({"severity": 0.0 if ok else 1.0, "penalty": 1.0})
            return _RunResult({"ok": ok})
        if runner.parser == "severity_json":
            try:
                rec = json.loads(proc.stdout.strip().splitlines()[-1])
                sev = min(1.0, max(0.0, float(rec["severity"])))
                pen = min(1.0, max(0.0, float(rec.get("penalty", 1.0))))
            except (IndexError, ValueError, KeyError, TypeError):
                return _RunResult(None, True, "malformed severity record", excerpt)
            if proc.returncode != 0:
                return _RunResult(None, True, f"exit status {proc.returncode}", excerpt)
            return _RunResult({"severity": sev, "penalty": pen})
        trace = parse_trace_records(proc.stdout)
        if trace is None:
            trace = trace_from_lines(proc.stdout + proc.stderr, self.anomaly_patterns)
        return _RunResult({"trace": trace.to_dict()})


def verify(
    candidate: Candidate,
    spec: Specification,
    runners: Sequence[ChannelRunner],
    worker_count: int = 1,
    *,
    base: ArtifactSnapshot,
    weights: ErrorWeights | None = None,
    cache: VerificationCache | None = None,
    workroot: str | Path | None = None,
) -> VerificationReport:
    """One-shot verification; build a :class:`Verifier` to reuse caches and counters."""
    v = Verifier(base, runners, weights, worker_count, cache, workroot)
    return v.verify(candidate, spec)
