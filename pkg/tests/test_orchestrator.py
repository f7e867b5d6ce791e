import json
from dataclasses import replace

import pytest

from refinery.context import ScoringWeights
from refinery.distribution import SearchConfig
from refinery.generator import GeneratorUnavailable
from refinery.metrics import MetricError, SpecClause, Specification
from refinery.orchestrator import (
    RECORDS,
    STATE,
    DemandEvent,
    ResumeError,
    RunAborted,
    RunConfig,
    Termination,
    extend_spec,
    load_records,
    resume,
    run,
)
from refinery.synthbench import (
    DEFAULT_CONFIG,
    SyntheticGenerator,
    decode_vector,
    load_fixture,
    space_from_dict,
)
from refinery.hypothesis import materialize

S1 = load_fixture("S1")


def go(space, cfg, run_dir=None, stop_after=None, generator=None):
    return run(space.base_snapshot(), space.spec, space.runners(),
               generator or SyntheticGenerator(space), cfg, space.demand_events(), run_dir,
               stop_after)


def strip(records):
    return [r.to_dict(timing=False) for r in records]


def test_already_correct_artifact_stops_immediately():
    space = replace(S1, start=S1.plant)
    res = go(space, DEFAULT_CONFIG)
    assert res.termination == "success" and res.iterations == 1
    assert res.records[0].proposals == 0 and res.final_delta == 0.0


def test_converges_to_planted_optimum():
    res = go(S1, replace(DEFAULT_CONFIG, seed=1))
    assert res.termination == "success"
    vec = decode_vector(materialize(S1.base_snapshot(), res.final_candidate))
    assert vec == S1.plant


def test_unsatisfiable_space_ends_by_stall_or_budget():
    space = load_fixture("S4")
    cfg = replace(DEFAULT_CONFIG, termination=Termination(0.0, 40, 10))
    res = go(space, cfg)
    assert res.termination in ("stall", "budget")
    assert res.final_delta == pytest.approx(1 / 3)


def test_budget_termination():
    cfg = replace(DEFAULT_CONFIG, termination=Termination(0.0, 2, 50))
    assert go(load_fixture("S4"), cfg).termination == "budget"


def test_best_delta_monotone_within_a_version():
    res = go(load_fixture("S3"), replace(DEFAULT_CONFIG, seed=4))
    for a, b in zip(res.records, res.records[1:]):
        if a.spec_version == b.spec_version:
            assert b.best_delta <= a.best_delta
    assert {r.spec_version for r in res.records} == {0, 1}


def test_record_contents():
    res = go(S1, replace(DEFAULT_CONFIG, seed=2), stop_after=3)
    assert res.termination == "interrupted"
    for r in res.records:
        assert len(r.pool) <= DEFAULT_CONFIG.search.pool_size
        assert set(r.deltas) == set(r.pool)
        assert sum(m for m, _ in r.distribution.values()) == pytest.approx(1.0, abs=1e-9)
        assert all(len(v) == 4 for v in r.feedback.values())


def test_history_feeds_context(tmp_path):
    cfg = replace(DEFAULT_CONFIG, history_cap=5, scoring=ScoringWeights())
    go(S1, cfg, tmp_path / "r", stop_after=2)
    lines = (tmp_path / "r" / "history.jsonl").read_text().splitlines()
    assert 0 < len(lines) <= 10
    assert {json.loads(x)["origin"] for x in lines} <= {"test_failure", "structural_finding",
                                                        "verify_finding", "log_excerpt"}


class Offline:
    notes: list = []

    def propose(self, req):
        raise GeneratorUnavailable("down")


def test_generator_outage_keeps_pool():
    res = go(S1, replace(DEFAULT_CONFIG, termination=Termination(0.0, 3, 50)),
             generator=Offline())
    assert res.termination == "budget"
    assert all(r.proposals == 0 for r in res.records)


def test_missing_runner_aborts():
    space = S1
    with pytest.raises(RunAborted):
        run(space.base_snapshot(), space.spec, space.runners()[:1], SyntheticGenerator(space),
            DEFAULT_CONFIG)


def test_refuses_to_overwrite_a_run(tmp_path):
    go(S1, DEFAULT_CONFIG, tmp_path / "r", stop_after=1)
    with pytest.raises(RunAborted):
        go(S1, DEFAULT_CONFIG, tmp_path / "r")


class TestExtendSpec:
    spec = Specification((SpecClause("a", "test"),))

    def test_appends_and_bumps_version(self):
        out = extend_spec(self.spec, [SpecClause("b", "verify", 2.0)])
        assert list(out.ids) == ["a", "b"] and out.version == 1
        assert self.spec.version == 0

    def test_duplicate_id(self):
        with pytest.raises(MetricError):
            extend_spec(self.spec, [SpecClause("a", "verify")])

    def test_duplicate_within_extension(self):
        with pytest.raises(MetricError):
            extend_spec(self.spec, [SpecClause("b", "test"), SpecClause("b", "test")])


class TestResume:
    cfg = replace(DEFAULT_CONFIG, seed=7, history_cap=4)

    def resume(self, space, run_dir, stop_after=None):
        return resume(run_dir, space.base_snapshot(), space.spec, space.runners(),
                      SyntheticGenerator(space), self.cfg, space.demand_events(), stop_after)

    def test_interrupted_run_replays_exactly(self, tmp_path):
        space = load_fixture("S3")
        full = go(space, self.cfg, tmp_path / "full")
        part = go(space, self.cfg, tmp_path / "part", stop_after=5)
        assert part.iterations == 5
        done = self.resume(space, tmp_path / "part")
        assert strip(done.records) == strip(full.records)
        assert strip(load_records(tmp_path / "part")) == strip(full.records)
        assert done.final_candidate == full.final_candidate
        assert (tmp_path / "part" / "history.jsonl").read_text() == \
            (tmp_path / "full" / "history.jsonl").read_text()

    def test_torn_tail_is_discarded(self, tmp_path):
        full = go(S1, self.cfg, tmp_path / "full")
        go(S1, self.cfg, tmp_path / "part", stop_after=4)
        with (tmp_path / "part" / RECORDS).open("a") as fh:
            fh.write('{"t": 5, "pool": [')
        done = self.resume(S1, tmp_path / "part")
        assert strip(done.records) == strip(full.records)

    def test_record_written_but_no_checkpoint(self, tmp_path):
        full = go(S1, self.cfg, tmp_path / "full")
        go(S1, self.cfg, tmp_path / "part", stop_after=4)
        # simulate a crash between the record append and the state write
        line = json.dumps(full.records[4].to_dict(), sort_keys=True) + "\n"
        with (tmp_path / "part" / RECORDS).open("a") as fh:
            fh.write(line)
        done = self.resume(S1, tmp_path / "part")
        assert strip(done.records) == strip(full.records)

    def test_completed_run_is_unchanged(self, tmp_path):
        full = go(S1, self.cfg, tmp_path / "r")
        before = (tmp_path / "r" / RECORDS).read_text()
        again = self.resume(S1, tmp_path / "r")
        assert (tmp_path / "r" / RECORDS).read_text() == before
        assert again.termination == full.termination
        assert again.final_candidate == full.final_candidate

    def test_empty_directory(self, tmp_path):
        with pytest.raises(ResumeError):
            self.resume(S1, tmp_path)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(ResumeError):
            self.resume(S1, tmp_path / "nope")

    def test_corrupt_record(self, tmp_path):
        go(S1, self.cfg, tmp_path / "r", stop_after=3)
        path = tmp_path / "r" / RECORDS
        lines = path.read_text().splitlines()
        lines[1] = "garbage"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ResumeError):
            self.resume(S1, tmp_path / "r")

    def test_different_base_rejected(self, tmp_path):
        go(S1, self.cfg, tmp_path / "r", stop_after=2)
        other = replace(S1, start=(1, 1, 1))
        with pytest.raises(ResumeError):
            self.resume(other, tmp_path / "r")

    def test_state_is_valid_json(self, tmp_path):
        go(S1, self.cfg, tmp_path / "r", stop_after=2)
        st = json.loads((tmp_path / "r" / STATE).read_text())
        assert st["t"] == 2 and st["records"] == 2


def test_demand_applies_new_runners_only_once():
    space = load_fixture("S3")
    res = go(space, replace(DEFAULT_CONFIG, seed=0))
    at = space.demands[0].at_iteration
    versions = [r.spec_version for r in res.records]
    assert versions[: at - 1] == [0] * (at - 1)
    assert all(v == 1 for v in versions[at - 1:])


@pytest.mark.parametrize("kwargs", [dict(budget=-1), dict(worker_count=0), dict(recency=-1),
                                    dict(history_cap=-1)])
def test_invalid_run_config(kwargs):
    with pytest.raises(ValueError):
        RunConfig(**kwargs)


def test_invalid_termination_and_demands():
    with pytest.raises(ValueError):
        Termination(delta_threshold=2.0)
    with pytest.raises(ValueError):
        Termination(max_iterations=0)
    with pytest.raises(ValueError):
        DemandEvent(0)


def test_fixture_loaded_from_dict_runs():
    space = space_from_dict({"id": "tiny", "slots": [3], "plant": [2],
                             "clauses": [{"id": "t", "kind": "test",
                                          "rule": {"type": "match", "slot": 0, "value": 2}}]})
    cfg = replace(DEFAULT_CONFIG, search=SearchConfig(pool_size=4))
    assert go(space, cfg).termination == "success"
