"""Enumerable synthetic hypothesis spaces and convergence experiments.

A candidate is one symbol per slot. The artifact is a single parameter
file (``params.cfg``, one ``sN = value`` line per slot) so synthetic
candidates go through the same edit / materialize / verify path as real
ones. Clause rules are small deterministic functions of the symbol vector.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .distribution import SearchConfig
from .generator import Proposal, ProposalRequest
from .hypothesis import ArtifactSnapshot, Edit, materialize
from .metrics import ErrorWeights, LogTrace, SpecClause, Specification, evaluate
from .metrics import StructuralOutcome, TestOutcome, VerifyOutcome
from .orchestrator import DemandEvent, Refiner, RunConfig, RunResult, Termination
from .verification import ChannelRunner

PARAM_FILE = "params.cfg"
MAX_SPACE = 100_000
REPORT_COLUMNS = ("seed", "lam", "success", "iterations", "final_delta", "best_delta",
                  "in_argmin", "demand_at", "reconverge_iterations", "final_candidate",
                  "trajectory")


class SpaceTooLarge(ValueError):
    pass


class FixtureError(ValueError):
    pass


# -- rules ---------------------------------------------------------------------

def _rule_value(rule: Mapping, vec: Sequence[int], slots: Sequence[int]) -> float:
    """Violation level in [0, 1] of one rule on a symbol vector (0 = satisfied)."""
    kind = rule["type"]
    if kind == "match":
        return 0.0 if vec[rule["slot"]] == rule["value"] else 1.0
    if kind == "in_set":
        return 0.0 if vec[rule["slot"]] in rule["values"] else 1.0
    if kind == "sum_mod":
        total = sum(vec[s] for s in rule["slots"])
        return 0.0 if total % rule["modulus"] == rule["remainder"] else 1.0
    if kind == "distance":
        s = rule["slot"]
        return abs(vec[s] - rule["value"]) / max(1, slots[s] - 1)
    if kind == "table":
        return float(rule["values"][vec[rule["slot"]]])
    raise FixtureError(f"unknown rule type {kind!r}")


def clause_outcome(clause: SpecClause, rule: Mapping, vec: Sequence[int],
                   slots: Sequence[int]):
    level = _rule_value(rule, vec, slots)
    if clause.kind == "test":
        return TestOutcome(clause.id, level == 0)
    if clause.kind == "verify":
        return VerifyOutcome(clause.id, level == 0)
    return StructuralOutcome(clause.id, level, float(rule.get("penalty", 1.0)), level > 0)


def log_trace(rule: Mapping, vec: Sequence[int]) -> LogTrace:
    if rule["type"] != "hamming":
        raise FixtureError(f"unknown log rule {rule['type']!r}")
    target = rule["target"]
    frac = sum(a != b for a, b in zip(vec, target)) / len(target)
    horizon = float(rule.get("horizon", 1.0))
    return LogTrace(horizon, ((0.0, 0.0), (horizon, frac)))


# -- spaces ----------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticDemand:
    at_iteration: int
    clauses: tuple[tuple[SpecClause, dict], ...]


@dataclass(frozen=True)
class SyntheticSpace:
    id: str
    slots: tuple[int, ...]
    clauses: tuple[tuple[SpecClause, dict], ...]
    logs: tuple[tuple[str, dict], ...] = ()
    start: tuple[int, ...] | None = None
    plant: tuple[int, ...] | None = None
    demands: tuple[SyntheticDemand, ...] = ()
    weights: ErrorWeights = field(default_factory=ErrorWeights)

    def __post_init__(self):
        if not self.slots or any(n < 1 for n in self.slots):
            raise FixtureError("every slot needs at least one symbol")
        if self.start is None:
            object.__setattr__(self, "start", tuple(0 for _ in self.slots))
        for vec in (self.start, self.plant):
            if vec is not None and not self.contains(vec):
                raise FixtureError(f"{vec} is not a point of the space")

    @property
    def size(self) -> int:
        return math.prod(self.slots)

    def contains(self, vec: Sequence[int]) -> bool:
        return len(vec) == len(self.slots) and all(0 <= v < n for v, n in zip(vec, self.slots))

    @property
    def spec(self) -> Specification:
        return Specification(tuple(c for c, _ in self.clauses))

    def spec_versions(self) -> list[Specification]:
        """The initial specification followed by one entry per demand event."""
        out = [self.spec]
        for d in self.demands:
            out.append(out[-1].extended(c for c, _ in d.clauses))
        return out

    def final_spec(self) -> Specification:
        return self.spec_versions()[-1]

    def rules(self) -> dict[str, dict]:
        out = {c.id: r for c, r in self.clauses}
        for d in self.demands:
            out.update({c.id: r for c, r in d.clauses})
        return out

    def delta(self, vec: Sequence[int], spec: Specification | None = None) -> float:
        """Direct evaluation (no edits, no verifier): the brute-force path."""
        spec = spec or self.spec
        rules = self.rules()
        outcomes = [clause_outcome(c, rules[c.id], vec, self.slots) for c in spec.clauses]
        traces = [log_trace(r, vec) for _, r in self.logs] or None
        return evaluate(spec, outcomes, traces, self.weights)[1]

    def neighbors(self, vec: Sequence[int]) -> list[tuple[int, ...]]:
        out = []
        for s, n in enumerate(self.slots):
            for v in range(n):
                if v != vec[s]:
                    out.append(tuple(vec[:s]) + (v,) + tuple(vec[s + 1:]))
        return out

    # artifact encoding

    def base_snapshot(self) -> ArtifactSnapshot:
        return ArtifactSnapshot({PARAM_FILE: encode_vector(self.start).encode()})

    def edits_for(self, vec: Sequence[int]) -> tuple[Edit, ...]:
        return tuple(Edit(f"{PARAM_FILE}#s{i}", "set_parameter", int(v))
                     for i, v in enumerate(vec))

    def runners(self, clauses: Sequence[tuple[SpecClause, dict]] | None = None,
                with_logs: bool = True) -> list[ChannelRunner]:
        clauses = self.clauses if clauses is None else clauses
        out = []
        for clause, rule in clauses:
            out.append(ChannelRunner(
                clause.id, "exit_code", definition=repr(sorted(rule.items())),
                check=_ClauseCheck(clause, rule, self.slots)))
        if with_logs:
            for log_id, rule in self.logs:
                out.append(ChannelRunner(log_id, "trace_json",
                                         definition=repr(sorted(rule.items())),
                                         check=_LogCheck(rule)))
        return out

    def demand_events(self) -> list[DemandEvent]:
        return [DemandEvent(d.at_iteration, tuple(c for c, _ in d.clauses),
                            tuple(self.runners(d.clauses, with_logs=False)))
                for d in self.demands]


def encode_vector(vec: Sequence[int]) -> str:
    return "".join(f"s{i} = {v}\n" for i, v in enumerate(vec))


def decode_vector(snapshot: ArtifactSnapshot) -> tuple[int, ...]:
    values = {}
    for line in snapshot.text(PARAM_FILE).splitlines():
        name, _, value = line.partition("=")
        values[int(name.strip()[1:])] = int(value.strip())
    return tuple(values[i] for i in range(len(values)))


class _ClauseCheck:
    # a class rather than a closure so runners survive pickling for process pools
    def __init__(self, clause, rule, slots):
        self.clause, self.rule, self.slots = clause, rule, slots

    def __call__(self, snapshot):
        vec = decode_vector(snapshot)
        level = _rule_value(self.rule, vec, self.slots)
        if self.clause.kind == "structural":
            return (level, float(self.rule.get("penalty", 1.0)))
        return level == 0


class _LogCheck:
    def __init__(self, rule):
        self.rule = rule

    def __call__(self, snapshot):
        return log_trace(self.rule, decode_vector(snapshot))


class SyntheticGenerator:
    """Proposes single-slot neighbors of the parent in a seeded random order.

    Once every neighbor has been proposed, further requests re-propose from
    the start of the same order.
    """

    def __init__(self, space: SyntheticSpace):
        self.space = space
        self.notes: list[str] = []

    def propose(self, req: ProposalRequest) -> list[Proposal]:
        vec = decode_vector(req.incumbent)
        nbrs = self.space.neighbors(vec)
        if not nbrs:
            return []
        digest = req.incumbent.digest()
        rng = np.random.default_rng([int(digest[:16], 16), req.seed & 0xFFFFFFFFFFFFFFFF])
        order = [nbrs[i] for i in rng.permutation(len(nbrs))]
        picks = [order[k % len(order)] for k in range(req.n)]
        return [Proposal(self.space.edits_for(v), rationale=f"set {v}", absolute=True)
                for v in picks]


# -- fixtures ------------------------------------------------------------------

def _parse_clauses(raw: Sequence[Mapping]) -> tuple[tuple[SpecClause, dict], ...]:
    out = []
    for c in raw:
        rule = dict(c["rule"])
        clause = SpecClause(str(c["id"]), c["kind"], float(c.get("weight", 1.0)),
                            c.get("description", "") or _describe(rule))
        out.append((clause, rule))
    return tuple(out)


def _describe(rule: Mapping) -> str:
    return ", ".join(f"{k}={v}" for k, v in sorted(rule.items()))


def space_from_dict(d: Mapping, resolve=None) -> SyntheticSpace:
    """Build a space from its structured form. ``extends`` names a parent fixture."""
    if "extends" in d:
        if resolve is None:
            raise FixtureError("'extends' needs a fixture resolver")
        parent = resolve(d["extends"])
        merged = {"slots": list(parent.slots), "start": list(parent.start),
                  "plant": list(parent.plant) if parent.plant else None,
                  "_clauses": parent.clauses, "_logs": parent.logs,
                  "_demands": parent.demands}
        merged.update({k: v for k, v in d.items() if k != "extends"})
        d = merged
    clauses = d["_clauses"] if "_clauses" in d and "clauses" not in d else \
        _parse_clauses(d.get("clauses", []))
    logs = d["_logs"] if "_logs" in d and "logs" not in d else \
        tuple((str(x["id"]), dict(x["rule"])) for x in d.get("logs", []))
    demands = tuple(d.get("_demands", ())) + tuple(
        SyntheticDemand(int(x["at_iteration"]), _parse_clauses(x["clauses"]))
        for x in d.get("demands", []))
    w = d.get("weights") or {}
    return SyntheticSpace(
        id=str(d.get("id", "custom")), slots=tuple(int(n) for n in d["slots"]),
        clauses=clauses, logs=logs,
        start=tuple(d["start"]) if d.get("start") is not None else None,
        plant=tuple(d["plant"]) if d.get("plant") is not None else None,
        demands=demands, weights=ErrorWeights(**{f"alpha_{k}": float(v) for k, v in w.items()}))


def fixture_ids() -> list[str]:
    files = resources.files("refinery") / "fixtures"
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".yaml"))


def load_fixture(name: str | os.PathLike) -> SyntheticSpace:
    """Load a shipped fixture by id (``S1``) or a fixture file by path."""
    path = Path(name)
    if path.suffix in (".yaml", ".yml") and path.exists():
        text = path.read_text()
    else:
        res = resources.files("refinery") / "fixtures" / f"{name}.yaml"
        if not res.is_file():
            raise FixtureError(f"unknown fixture {name!r}; known: {', '.join(fixture_ids())}")
        text = res.read_text()
    space = space_from_dict(yaml.safe_load(text), resolve=load_fixture)
    if space.plant is not None and space.delta(space.plant, space.final_spec()) != 0.0:
        raise FixtureError(f"{space.id}: planted optimum does not reach zero error")
    return space


# -- oracle -----------------------------------------------------------------------

def brute_force_min_delta(space: SyntheticSpace, spec: Specification | None = None,
                          tol: float = 1e-12) -> tuple[float, list[tuple[int, ...]]]:
    """Exhaustive sweep; returns the minimum and all minimizers in lexicographic order."""
    if space.size > MAX_SPACE:
        raise SpaceTooLarge(f"{space.size} candidates exceed the brute-force cap {MAX_SPACE}")
    spec = spec or space.spec
    values = [(vec, space.delta(vec, spec))
              for vec in itertools.product(*(range(n) for n in space.slots))]
    best = min(d for _, d in values)
    return best, [vec for vec, d in values if d <= best + tol]


# -- experiments -------------------------------------------------------------------

DEFAULT_CONFIG = RunConfig(
    search=SearchConfig(lam=2.0, pool_size=8, exploration_fraction=0.25, newcomer_mass=0.4),
    termination=Termination(delta_threshold=0.0, max_iterations=100, stall_window=100),
    history_cap=0,
)


@dataclass(frozen=True)
class ConvergenceExperiment:
    space: SyntheticSpace
    config: RunConfig = DEFAULT_CONFIG
    seeds: tuple[int, ...] = tuple(range(10))
    workers: int = 1

    @property
    def replicates(self) -> int:
        return len(self.seeds)


def run_replicate(space: SyntheticSpace, cfg: RunConfig, run_dir=None,
                  stop_after=None) -> RunResult:
    ref = Refiner(space.base_snapshot(), space.spec, space.runners(), SyntheticGenerator(space),
                  cfg, space.demand_events(), run_dir)
    return ref.loop(stop_after)


def _row(space: SyntheticSpace, cfg: RunConfig, result: RunResult,
         argmin: dict[int, set]) -> dict[str, Any]:
    final_vec = decode_vector(materialize(space.base_snapshot(), result.final_candidate))
    success = result.termination == "success"
    demand_at = space.demands[-1].at_iteration if space.demands else None
    reconverge = None
    if demand_at is not None and success and result.iterations >= demand_at:
        reconverge = result.iterations - demand_at
    return {
        "seed": cfg.seed,
        "lam": cfg.search.lam,
        "success": success,
        "iterations": result.iterations,
        "final_delta": result.final_delta,
        "best_delta": min(r.best_delta for r in result.records
                          if r.spec_version == result.spec.version),
        "in_argmin": final_vec in argmin.get(result.spec.version, ()),
        "demand_at": demand_at,
        "reconverge_iterations": reconverge,
        "final_candidate": final_vec,
        "trajectory": [r.best_delta for r in result.records],
        "versions": [r.spec_version for r in result.records],
    }


def _replicate_row(args) -> dict[str, Any]:
    space, cfg, argmin = args
    return _row(space, cfg, run_replicate(space, cfg), argmin)


def run_experiment(exp: ConvergenceExperiment) -> list[dict[str, Any]]:
    """One row per seed, in seed order."""
    space = exp.space
    argmin = {sp.version: set(brute_force_min_delta(space, sp)[1])
              for sp in space.spec_versions()}
    jobs = [(space, replace(exp.config, seed=s), argmin) for s in exp.seeds]
    if exp.workers > 1:
        with ProcessPoolExecutor(max_workers=exp.workers) as ex:
            return list(ex.map(_replicate_row, jobs))
    return [_replicate_row(j) for j in jobs]


def iterations_to_success(row: Mapping, max_iterations: int) -> int:
    """Censored count: unsuccessful replicates count as the full budget."""
    return row["iterations"] if row["success"] else max_iterations


def summarize(rows: Sequence[Mapping]) -> dict[str, float]:
    wins = [r["iterations"] for r in rows if r["success"]]
    return {
        "replicates": len(rows),
        "success_rate": sum(1 for r in rows if r["success"]) / len(rows),
        "median_iterations": statistics.median(wins) if wins else float("nan"),
    }


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return " ".join(_cell(v) for v in value)
    return str(value)


def render_report(rows: Sequence[Mapping]) -> str:
    if not rows:
        raise ValueError("empty result table")
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in REPORT_COLUMNS])
    s = summarize(rows)
    buf.write(f"#summary\treplicates={s['replicates']}\tsuccess_rate={s['success_rate']!r}"
              f"\tmedian_iterations={s['median_iterations']!r}\n")
    return buf.getvalue()


def parse_report(text: str) -> tuple[list[dict[str, str]], dict[str, str]]:
    lines = text.splitlines()
    summary_line = next(line for line in lines if line.startswith("#summary"))
    summary = dict(kv.split("=", 1) for kv in summary_line.split("\t")[1:])
    body = [line for line in lines if not line.startswith("#")]
    rows = list(csv.DictReader(io.StringIO("\n".join(body)), delimiter="\t"))
    return rows, summary


def emit_report(rows: Sequence[Mapping], path: str | os.PathLike) -> Path:
    """Write the TSV report atomically."""
    path = Path(path)
    text = render_report(rows)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path
