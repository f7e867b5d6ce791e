"""YAML run configuration.

A config names the artifact (a directory, or a shipped synthetic fixture),
the specification clauses with their runners, the generator, and the
search settings. Problems are collected per field and reported together,
e.g. ``runners[1].parser: unknown parser 'xml'``.

In runner commands the token ``{python}`` expands to the running
interpreter, so example projects do not depend on what ``python`` means
on the host.
"""

from __future__ import annotations

import copy
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .context import ScoringWeights
from .distribution import DistributionError, SearchConfig
from .generator import MutationGenerator, RemoteGenerator
from .hypothesis import ArtifactSnapshot
from .metrics import CLAUSE_KINDS, ErrorWeights, MetricError, SpecClause, Specification
from .orchestrator import DemandEvent, RunConfig, Termination
from .synthbench import FixtureError, SyntheticGenerator, SyntheticSpace, load_fixture
from .verification import PARSERS, BUILTIN_CHECKS, ChannelRunner, VerificationError

CONFIG_SNAPSHOT = "config.yaml"
GENERATOR_KINDS = ("mutation", "remote", "synthetic")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n" + "\n".join(f"  {p}" for p in problems))


@dataclass
class LoadedConfig:
    """Everything a run needs, built from one config document."""

    base: ArtifactSnapshot
    spec: Specification
    runners: list[ChannelRunner]
    generator: Any
    run: RunConfig
    demands: list[DemandEvent] = field(default_factory=list)
    raw: dict = field(default_factory=dict)  # resolved document, saved with the run
    space: SyntheticSpace | None = None


class _Problems:
    def __init__(self):
        self.items: list[str] = []

    def add(self, where: str, msg: str) -> None:
        self.items.append(f"{where}: {msg}")

    def mapping(self, doc: Any, where: str, allowed: set[str]) -> dict:
        if doc is None:
            return {}
        if not isinstance(doc, Mapping):
            self.add(where, f"expected a mapping, got {type(doc).__name__}")
            return {}
        for k in doc:
            if k not in allowed:
                self.add(f"{where}.{k}" if where else str(k), "unknown key")
        return dict(doc)

    def number(self, doc: Mapping, key: str, where: str, default, kind=float, lo=None, hi=None):
        if key not in doc:
            return default
        v = doc[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or \
                (kind is int and not float(v).is_integer()):
            self.add(f"{where}.{key}", f"expected {'an integer' if kind is int else 'a number'},"
                                        f" got {v!r}")
            return default
        v = kind(v)
        if (lo is not None and v < lo) or (hi is not None and v > hi):
            rng = f"[{lo if lo is not None else '-inf'}, {hi if hi is not None else 'inf'}]"
            self.add(f"{where}.{key}", f"{v} is outside {rng}")
            return default
        return v


def _clause(p: _Problems, doc: Any, where: str) -> SpecClause | None:
    d = p.mapping(doc, where, {"id", "kind", "weight", "description"})
    if "id" not in d or not str(d.get("id", "")).strip():
        p.add(f"{where}.id", "required")
        return None
    if d.get("kind") not in CLAUSE_KINDS:
        p.add(f"{where}.kind", f"expected one of {', '.join(CLAUSE_KINDS)}, got {d.get('kind')!r}")
        return None
    weight = p.number(d, "weight", where, 1.0)
    if weight <= 0:
        p.add(f"{where}.weight", "must be > 0")
        return None
    return SpecClause(str(d["id"]), d["kind"], weight, str(d.get("description", "")))


def _runner(p: _Problems, doc: Any, where: str) -> ChannelRunner | None:
    d = p.mapping(doc, where, {"clause", "id", "parser", "command", "builtin", "timeout"})
    rid = d.get("clause", d.get("id"))
    if rid is None:
        p.add(where, "needs 'clause' (or 'id' for a log runner)")
        return None
    parser = d.get("parser", "exit_code")
    if parser not in PARSERS:
        p.add(f"{where}.parser", f"unknown parser {parser!r}; expected one of {', '.join(PARSERS)}")
        return None
    command = d.get("command")
    if command is not None:
        if isinstance(command, str):
            command = command.split()
        if not isinstance(command, list) or not command:
            p.add(f"{where}.command", "expected a non-empty list of arguments")
            return None
        command = tuple(str(a).replace("{python}", sys.executable) for a in command)
    builtin = d.get("builtin")
    if builtin is not None and str(builtin).split(":", 1)[0] not in BUILTIN_CHECKS:
        p.add(f"{where}.builtin", f"unknown builtin {builtin!r}; known: "
                                  f"{', '.join(sorted(BUILTIN_CHECKS))}")
        return None
    if (command is None) == (builtin is None):
        p.add(where, "needs exactly one of 'command' or 'builtin'")
        return None
    timeout = p.number(d, "timeout", where, 60.0, lo=1e-3)
    try:
        return ChannelRunner(str(rid), parser, command=command, builtin=builtin, timeout=timeout)
    except VerificationError as exc:
        p.add(where, str(exc))
        return None


def _clause_list(p: _Problems, raw: Any, where: str) -> list[SpecClause]:
    if not isinstance(raw, list):
        p.add(where, "expected a list of clauses")
        return []
    return [c for i, x in enumerate(raw) if (c := _clause(p, x, f"{where}[{i}]")) is not None]


def _runner_list(p: _Problems, raw: Any, where: str) -> list[ChannelRunner]:
    if raw is None:
        return []
    if not isinstance(raw, list):
        p.add(where, "expected a list of runners")
        return []
    return [r for i, x in enumerate(raw) if (r := _runner(p, x, f"{where}[{i}]")) is not None]


def _run_config(p: _Problems, doc: Mapping) -> RunConfig:
    w = p.mapping(doc.get("weights"), "weights", {"test", "struct", "verify", "logs"})
    weights = {f"alpha_{k}": p.number(w, k, "weights", 1.0, lo=0.0) for k in
               ("test", "struct", "verify", "logs")}
    s = p.mapping(doc.get("search"), "search",
                  {"lam", "pool_size", "exploration_fraction", "newcomer_mass", "survivors"})
    search_kw = dict(
        lam=p.number(s, "lam", "search", 2.0, lo=0.0),
        pool_size=p.number(s, "pool_size", "search", 8, int, lo=1),
        exploration_fraction=p.number(s, "exploration_fraction", "search", 0.25, lo=0.0, hi=1.0),
        newcomer_mass=p.number(s, "newcomer_mass", "search", 0.4, lo=0.0, hi=1.0),
        survivors=p.number(s, "survivors", "search", None, int, lo=1),
    )
    try:
        search = SearchConfig(**search_kw)
    except DistributionError as exc:
        p.add("search", str(exc))
        search = SearchConfig()
    c = p.mapping(doc.get("context"), "context",
                  {"budget", "recency", "history_cap", "high_severity_weight", "scoring"})
    sc = p.mapping(c.get("scoring"), "context.scoring", {f"theta{i}" for i in range(1, 6)})
    scoring = ScoringWeights(**{f"theta{i}": p.number(sc, f"theta{i}", "context.scoring", 1.0,
                                                      lo=0.0) for i in range(1, 6)})
    t = p.mapping(doc.get("termination"), "termination",
                  {"delta_threshold", "max_iterations", "stall_window"})
    termination = Termination(
        p.number(t, "delta_threshold", "termination", 0.0, lo=0.0, hi=1.0),
        p.number(t, "max_iterations", "termination", 50, int, lo=1),
        p.number(t, "stall_window", "termination", 20, int, lo=1))
    return RunConfig(
        weights=ErrorWeights(**weights), search=search, scoring=scoring,
        budget=p.number(c, "budget", "context", 4000, int, lo=0),
        recency=p.number(c, "recency", "context", 3, int, lo=0),
        worker_count=p.number(doc, "workers", "", 1, int, lo=1),
        termination=termination,
        seed=p.number(doc, "seed", "", 0, int, lo=0),
        history_cap=p.number(c, "history_cap", "context", 20, int, lo=0),
        high_severity_weight=p.number(c, "high_severity_weight", "context", 2.0, lo=0.0))


def _generator(p: _Problems, doc: Any, space: SyntheticSpace | None):
    g = p.mapping(doc, "generator", {"kind", "vocabulary", "files", "operators", "endpoint",
                                     "timeout", "max_in_flight"})
    kind = g.get("kind", "synthetic" if space is not None else "mutation")
    if kind not in GENERATOR_KINDS:
        p.add("generator.kind", f"expected one of {', '.join(GENERATOR_KINDS)}, got {kind!r}")
        return None
    if kind == "synthetic":
        if space is None:
            p.add("generator.kind", "'synthetic' only works with a fixture artifact")
            return None
        return SyntheticGenerator(space)
    if kind == "remote":
        try:
            return RemoteGenerator(g.get("endpoint"),
                                   timeout=p.number(g, "timeout", "generator", 60.0, lo=1e-3),
                                   max_in_flight=p.number(g, "max_in_flight", "generator", 4,
                                                          int, lo=1))
        except ValueError as exc:
            p.add("generator.endpoint", str(exc))
            return None
    ops = g.get("operators")
    if ops is not None:
        bad = [o for o in ops if o not in MutationGenerator.OPERATORS]
        if bad:
            p.add("generator.operators", f"unknown operators {bad}; expected a subset of "
                                         f"{', '.join(MutationGenerator.OPERATORS)}")
            return None
    return MutationGenerator([str(v) for v in g.get("vocabulary") or ()],
                             g.get("files"), ops)


def build(doc: Any, root: str | Path = ".") -> LoadedConfig:
    """Validate a parsed document; relative artifact paths resolve against ``root``."""
    p = _Problems()
    allowed = {"artifact", "fixture", "spec", "runners", "demands", "generator", "weights",
               "search", "context", "termination", "seed", "workers"}
    doc = p.mapping(doc, "", allowed)
    raw = copy.deepcopy(doc)
    space = None
    base = None
    spec_clauses: list[SpecClause] = []
    runners: list[ChannelRunner] = []
    demands: list[DemandEvent] = []

    if ("artifact" in doc) == ("fixture" in doc):
        p.add("artifact", "give exactly one of 'artifact' (a directory) or 'fixture'")
    elif "fixture" in doc:
        fx = doc["fixture"]
        fx_path = Path(root, fx)
        try:
            space = load_fixture(fx_path if fx_path.suffix in (".yaml", ".yml") else fx)
        except FixtureError as exc:
            p.add("fixture", str(exc))
        else:
            if fx_path.suffix in (".yaml", ".yml"):
                raw["fixture"] = str(fx_path.resolve())
            for key in ("spec", "runners", "demands"):
                if key in doc:
                    p.add(key, "not allowed with a fixture; the fixture defines it")
            base = space.base_snapshot()
            spec_clauses = list(space.spec.clauses)
            runners = space.runners()
            demands = space.demand_events()
    else:
        art = Path(root, str(doc["artifact"])).resolve()
        raw["artifact"] = str(art)
        if not art.is_dir():
            p.add("artifact", f"{art} is not a directory")
        else:
            base = ArtifactSnapshot.from_directory(art, provenance=str(art))
        spec_clauses = _clause_list(p, doc.get("spec"), "spec")
        if not spec_clauses and "spec" in doc:
            p.add("spec", "needs at least one clause")
        elif "spec" not in doc:
            p.add("spec", "required")
        runners = _runner_list(p, doc.get("runners"), "runners")
        for i, ev in enumerate(doc.get("demands") or []):
            where = f"demands[{i}]"
            d = p.mapping(ev, where, {"at_iteration", "clauses", "runners"})
            at = p.number(d, "at_iteration", where, None, int, lo=1)
            if at is None:
                if "at_iteration" not in d:
                    p.add(f"{where}.at_iteration", "required")
                continue
            demands.append(DemandEvent(at, tuple(_clause_list(p, d.get("clauses"),
                                                              f"{where}.clauses")),
                                       tuple(_runner_list(p, d.get("runners"),
                                                          f"{where}.runners"))))

    # coverage: every clause has exactly one non-log runner, across all versions
    ids: dict[str, str] = {}
    all_clauses = list(spec_clauses) + [c for ev in demands for c in ev.new_clauses]
    all_runners = list(runners) + [r for ev in demands for r in ev.runners]
    for c in all_clauses:
        if c.id in ids:
            p.add("spec", f"duplicate clause id {c.id!r}")
        ids[c.id] = c.kind
    seen = set()
    for r in all_runners:
        if r.clause_id in seen:
            p.add("runners", f"duplicate runner for {r.clause_id!r}")
        seen.add(r.clause_id)
        if r.is_log and r.clause_id in ids:
            p.add("runners", f"{r.clause_id}: trace_json runners feed the log channel and "
                             "cannot be bound to a clause")
        elif not r.is_log and r.clause_id not in ids:
            p.add("runners", f"{r.clause_id}: no clause with this id")
        elif r.parser == "severity_json" and ids.get(r.clause_id) != "structural":
            p.add("runners", f"{r.clause_id}: severity_json needs a structural clause")
    for cid in ids:
        if cid not in seen:
            p.add("runners", f"clause {cid!r} has no runner")

    run_cfg = _run_config(p, doc)
    generator = _generator(p, doc.get("generator"), space)
    if p.items:
        raise ConfigError(p.items)
    try:
        spec = Specification(tuple(spec_clauses))
    except MetricError as exc:
        raise ConfigError([f"spec: {exc}"]) from exc
    return LoadedConfig(base, spec, runners, generator, run_cfg, demands, raw, space)


def load(path: str | Path) -> LoadedConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror or exc}"]) from exc
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML ({exc})"]) from exc
    return build(doc, path.parent)


def dump(cfg: LoadedConfig) -> str:
    """Resolved document (absolute paths), as stored next to a run."""
    return yaml.safe_dump(cfg.raw, sort_keys=True)
