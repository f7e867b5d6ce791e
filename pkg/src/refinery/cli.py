"""Command-line entry point.

Exit codes: 0 success, 1 run finished without reaching the error threshold
(stall or budget), 2 usage or configuration error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from . import config as configmod
from .context import HistoryError
from .orchestrator import (
    HISTORY,
    REPORT,
    IterationRecord,
    ResumeError,
    RunAborted,
    load_records,
    resume,
    run,
)
from .plotting import plot_run, plot_trajectories
from .synthbench import (
    DEFAULT_CONFIG,
    ConvergenceExperiment,
    FixtureError,
    emit_report,
    load_fixture,
    run_experiment,
    summarize,
)
from .verification import VerificationError

EXIT_OK, EXIT_UNSOLVED, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3

log = logging.getLogger("refinery")


class UsageError(Exception):
    pass


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _progress(quiet: bool):
    def show(rec: IterationRecord) -> None:
        if quiet:
            return
        rate = rec.cache_hits / rec.evaluations if rec.evaluations else 0.0
        end = f"  [{rec.termination}]" if rec.termination else ""
        print(f"t={rec.t:<4d} best={rec.best_delta:.6f} pool={len(rec.pool)} "
              f"cache={rate:6.1%}{end}", flush=True)
    return show


def _finish(result, run_dir: Path) -> int:
    if result.records:
        plot_run(result.records, run_dir / "run.png")
    print(f"termination={result.termination} iterations={result.iterations} "
          f"final_delta={result.final_delta:.6g} final_mu={result.final_mu:.4g}")
    print(f"report: {run_dir / REPORT}")
    return EXIT_OK if result.termination == "success" else EXIT_UNSOLVED


def cmd_run(args) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.is_file():
        raise UsageError(f"config file not found: {cfg_path}")
    try:
        doc = yaml.safe_load(cfg_path.read_text())
    except yaml.YAMLError as exc:
        raise configmod.ConfigError([f"{cfg_path}: not valid YAML ({exc})"]) from exc
    if not isinstance(doc, dict):
        raise configmod.ConfigError([f"{cfg_path}: expected a mapping at the top level"])
    if args.artifact is not None:
        doc.pop("fixture", None)
        doc["artifact"] = str(Path(args.artifact).resolve())
    if args.seed is not None:
        doc["seed"] = args.seed
    loaded = configmod.build(doc, cfg_path.parent)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise UsageError(f"{out} is not empty; use 'resume' to continue a run")
    out.mkdir(parents=True, exist_ok=True)
    _atomic_text(out / configmod.CONFIG_SNAPSHOT, configmod.dump(loaded))
    result = run(loaded.base, loaded.spec, loaded.runners, loaded.generator, loaded.run,
                 loaded.demands, out, on_iteration=_progress(args.quiet))
    return _finish(result, out)


def cmd_resume(args) -> int:
    run_dir = Path(args.run)
    snap = run_dir / configmod.CONFIG_SNAPSHOT
    if not snap.is_file():
        raise UsageError(f"{run_dir} has no config snapshot; not a run directory")
    loaded = configmod.load(snap)
    result = resume(run_dir, loaded.base, loaded.spec, loaded.runners, loaded.generator,
                    loaded.run, loaded.demands, on_iteration=_progress(args.quiet))
    return _finish(result, run_dir)


def cmd_bench(args) -> int:
    if args.replicates < 1:
        raise UsageError("--replicates must be at least 1")
    space = load_fixture(args.fixture)
    seeds = tuple(range(args.first_seed, args.first_seed + args.replicates))
    term = replace(DEFAULT_CONFIG.termination,
                   max_iterations=args.max_iterations or DEFAULT_CONFIG.termination.max_iterations)
    rows = []
    for lam in args.lam or [DEFAULT_CONFIG.search.lam]:
        cfg = replace(DEFAULT_CONFIG, termination=term,
                      search=replace(DEFAULT_CONFIG.search, lam=lam, pool_size=args.pool_size))
        part = run_experiment(ConvergenceExperiment(space, cfg, seeds, args.workers))
        s = summarize(part)
        print(f"{space.id} lam={lam:g}: success_rate={s['success_rate']:.2f} "
              f"median_iterations={s['median_iterations']}")
        rows.extend(part)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    emit_report(rows, out)
    fig = plot_trajectories(rows, out.with_suffix(".png"), title=space.id)
    print(f"report: {out}\nfigure: {fig}")
    return EXIT_OK


def _record_at(run_dir: Path, t: int) -> IterationRecord:
    records = load_records(run_dir)
    for r in records:
        if r.t == t:
            return r
    last = records[-1].t if records else 0
    raise UsageError(f"no iteration {t} in {run_dir} (last is {last})")


def cmd_inspect(args) -> int:
    run_dir = Path(args.run)
    rec = _record_at(run_dir, args.at)
    if args.what == "distribution":
        doc = {cid: {"mass": m, "last_delta": d} for cid, (m, d) in rec.distribution.items()}
    elif args.what == "feedback":
        doc = {cid: dict(zip(("test", "struct", "verify", "logs"), fb), delta=rec.deltas[cid],
                         mu=rec.mus[cid])
               for cid, fb in sorted(rec.feedback.items())}
    else:
        path = run_dir / HISTORY
        items = []
        if path.exists():
            items = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        doc = [x for x in items if x["iteration"] == args.at]
    print(json.dumps({"t": rec.t, "spec_version": rec.spec_version, args.what: doc},
                     indent=2, sort_keys=True))
    return EXIT_OK


def cmd_validate(args) -> int:
    loaded = configmod.load(args.config)
    print(f"ok: {len(loaded.spec.clauses)} clauses, {len(loaded.runners)} runners, "
          f"{len(loaded.demands)} demand events, generator "
          f"{type(loaded.generator).__name__}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="refinery",
                                 description="Iterative artifact refinement driven by "
                                             "multi-channel verification feedback.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="start a refinement run")
    p.add_argument("--config", required=True)
    p.add_argument("--artifact", help="artifact directory (overrides the config)")
    p.add_argument("--out", required=True, help="run directory to create")
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true", help="no per-iteration lines")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("resume", help="continue an interrupted run")
    p.add_argument("--run", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_resume)

    p = sub.add_parser("bench", help="convergence experiment on a synthetic fixture")
    p.add_argument("--fixture", required=True, help="shipped fixture id or a fixture file")
    p.add_argument("--replicates", type=int, default=10)
    p.add_argument("--out", required=True, help="TSV report path; a PNG is written next to it")
    p.add_argument("--lam", type=float, action="append",
                   help="temperature; repeat to compare several")
    p.add_argument("--pool-size", type=int, default=DEFAULT_CONFIG.search.pool_size)
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1, help="replicates run in parallel")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("inspect", help="print one iteration's records")
    p.add_argument("--run", required=True)
    p.add_argument("--what", required=True, choices=("distribution", "history", "feedback"))
    p.add_argument("--at", type=int, required=True)
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("validate-config", help="check a config without running")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_validate)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except configmod.ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, FixtureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RunAborted, ResumeError, HistoryError, VerificationError, OSError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except KeyboardInterrupt:
        print("interrupted; continue with 'refinery resume'", file=sys.stderr)
        return EXIT_ABORT
    except Exception as exc:  # anything else is a bug or an environment failure
        log.debug("unhandled error", exc_info=True)
        print(f"aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
