import json
from pathlib import Path

import pytest
import yaml

from refinery import config as configmod
from refinery.cli import main
from refinery.orchestrator import run
from refinery.synthbench import parse_report

SAMPLE = Path(__file__).resolve().parents[1] / "sample"


@pytest.fixture
def fixture_cfg(tmp_path):
    path = tmp_path / "s2.yaml"
    path.write_text("fixture: S2\nseed: 1\ntermination: {max_iterations: 60}\n"
                    "context: {history_cap: 3}\n")
    return path


def test_run_fixture_config(tmp_path, fixture_cfg, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", str(fixture_cfg), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert text.startswith("t=1 ")
    assert "termination=success" in text
    for name in ("config.yaml", "records.jsonl", "state.json", "history.jsonl", "cache.jsonl",
                 "report.json", "run.png"):
        assert (out / name).exists(), name
    assert not list(out.glob("*.tmp"))


def test_same_seed_same_report(tmp_path, fixture_cfg):
    for name in ("a", "b"):
        assert main(["run", "--config", str(fixture_cfg), "--out", str(tmp_path / name),
                     "--seed", "9", "--quiet"]) == 0
    assert (tmp_path / "a" / "report.json").read_text() == \
        (tmp_path / "b" / "report.json").read_text()


def test_missing_config(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.yaml"), "--out",
                 str(tmp_path / "r")]) == 2


def test_unknown_flag_rejected(fixture_cfg, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--config", str(fixture_cfg), "--out", str(tmp_path), "--colour"])
    assert exc.value.code == 2


def test_existing_run_dir_refused(tmp_path, fixture_cfg):
    out = tmp_path / "r"
    out.mkdir()
    (out / "records.jsonl").write_text("")
    assert main(["run", "--config", str(fixture_cfg), "--out", str(out)]) == 2


def test_unsolved_run_exits_nonzero(tmp_path, capsys):
    cfg = tmp_path / "s4.yaml"
    cfg.write_text("fixture: S4\ntermination: {max_iterations: 5, stall_window: 3}\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 1
    assert "termination=" in capsys.readouterr().out


def test_unwritable_run_dir_aborts(tmp_path, fixture_cfg):
    (tmp_path / "file").write_text("")
    assert main(["run", "--config", str(fixture_cfg), "--out",
                 str(tmp_path / "file" / "r")]) == 3


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("insp") / "r"
    cfg = out.parent / "c.yaml"
    cfg.write_text("fixture: S1\nseed: 2\ncontext: {history_cap: 4}\n"
                   "termination: {max_iterations: 6}\n")
    main(["run", "--config", str(cfg), "--out", str(out), "--quiet"])
    return out


class TestInspect:
    def test_distribution(self, run_dir, capsys):
        assert main(["inspect", "--run", str(run_dir), "--what", "distribution", "--at", "1"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert sum(v["mass"] for v in doc["distribution"].values()) == pytest.approx(1.0)

    def test_feedback_in_range(self, run_dir, capsys):
        assert main(["inspect", "--run", str(run_dir), "--what", "feedback", "--at", "2"]) == 0
        doc = json.loads(capsys.readouterr().out)["feedback"]
        for fb in doc.values():
            for ch in ("test", "struct", "verify", "logs"):
                assert 0.0 <= fb[ch] <= 1.0

    def test_history(self, run_dir, capsys):
        assert main(["inspect", "--run", str(run_dir), "--what", "history", "--at", "1"]) == 0
        items = json.loads(capsys.readouterr().out)["history"]
        assert 0 < len(items) <= 4 and all(x["iteration"] == 1 for x in items)

    def test_beyond_last_iteration(self, run_dir):
        assert main(["inspect", "--run", str(run_dir), "--what", "feedback", "--at", "999"]) == 2

    def test_bad_choice(self, run_dir):
        with pytest.raises(SystemExit) as exc:
            main(["inspect", "--run", str(run_dir), "--what", "mood", "--at", "1"])
        assert exc.value.code == 2


class TestBench:
    def test_rows_and_figure(self, tmp_path):
        out = tmp_path / "s1.tsv"
        assert main(["bench", "--fixture", "S1", "--replicates", "10", "--out", str(out)]) == 0
        rows, summary = parse_report(out.read_text())
        assert len(rows) == 10 and summary["replicates"] == "10"
        assert out.with_suffix(".png").stat().st_size > 0

    def test_demand_fixture_has_reconvergence(self, tmp_path):
        out = tmp_path / "s3.tsv"
        assert main(["bench", "--fixture", "S3", "--replicates", "3", "--out", str(out)]) == 0
        rows, _ = parse_report(out.read_text())
        assert all(r["demand_at"] == "10" for r in rows)
        assert any(r["reconverge_iterations"] for r in rows)

    def test_two_temperatures(self, tmp_path):
        out = tmp_path / "t4.tsv"
        assert main(["bench", "--fixture", "T4", "--replicates", "2", "--lam", "2",
                     "--lam", "0", "--out", str(out)]) == 0
        rows, _ = parse_report(out.read_text())
        assert [r["lam"] for r in rows] == ["2.0", "2.0", "0.0", "0.0"]

    def test_zero_replicates(self, tmp_path):
        assert main(["bench", "--fixture", "S1", "--replicates", "0",
                     "--out", str(tmp_path / "x.tsv")]) == 2

    def test_unknown_fixture(self, tmp_path):
        assert main(["bench", "--fixture", "S99", "--out", str(tmp_path / "x.tsv")]) == 2


class TestResume:
    def test_resume_after_interrupt(self, tmp_path):
        fixture_cfg = tmp_path / "s1.yaml"
        fixture_cfg.write_text("fixture: S1\nseed: 5\ncontext: {history_cap: 3}\n")
        full, part = tmp_path / "full", tmp_path / "part"
        main(["run", "--config", str(fixture_cfg), "--out", str(full), "--quiet"])
        # an interrupted run: same snapshot, loop stopped after three iterations
        loaded = configmod.load(fixture_cfg)
        part.mkdir()
        (part / "config.yaml").write_text(configmod.dump(loaded))
        run(loaded.base, loaded.spec, loaded.runners, loaded.generator, loaded.run,
            loaded.demands, part, stop_after=3)
        assert not (part / "report.json").exists()
        main(["resume", "--run", str(part), "--quiet"])
        strip = [{k: v for k, v in json.loads(x).items() if k != "wall_time"}
                 for x in (part / "records.jsonl").read_text().splitlines()]
        ref = [{k: v for k, v in json.loads(x).items() if k != "wall_time"}
               for x in (full / "records.jsonl").read_text().splitlines()]
        assert len(ref) > 3 and strip == ref
        assert (part / "report.json").read_text() == (full / "report.json").read_text()

    def test_resume_completed_run(self, tmp_path, fixture_cfg, capsys):
        out = tmp_path / "r"
        main(["run", "--config", str(fixture_cfg), "--out", str(out), "--quiet"])
        before = (out / "records.jsonl").read_text()
        assert main(["resume", "--run", str(out)]) == 0
        assert (out / "records.jsonl").read_text() == before

    def test_resume_empty_dir(self, tmp_path):
        assert main(["resume", "--run", str(tmp_path)]) == 2


class TestValidate:
    def test_sample_config(self, capsys):
        assert main(["validate-config", "--config", str(SAMPLE / "refine.yaml")]) == 0
        assert "5 clauses" in capsys.readouterr().out

    def test_field_diagnostics(self, tmp_path, capsys):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text(yaml.safe_dump({
            "artifact": str(SAMPLE / "calc"),
            "spec": [{"id": "a", "kind": "test"}, {"id": "b", "kind": "oracle"}],
            "runners": [{"clause": "a", "parser": "xml", "builtin": "python_compiles"}],
            "search": {"lam": -1, "pool_size": 2.5},
            "termination": {"max_iterations": 0},
            "colour": "blue",
        }))
        assert main(["validate-config", "--config", str(cfg)]) == 2
        err = capsys.readouterr().err
        for needle in ("spec[1].kind", "runners[0].parser", "search.lam", "search.pool_size",
                       "termination.max_iterations", "colour: unknown key",
                       "clause 'a' has no runner"):
            assert needle in err, needle

    def test_not_yaml(self, tmp_path):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("spec: [unclosed\n")
        assert main(["validate-config", "--config", str(cfg)]) == 2


class TestConfig:
    def test_defaults_and_overrides(self):
        c = configmod.load(SAMPLE / "refine.yaml")
        assert c.run.search.pool_size == 6 and c.run.worker_count == 2
        assert c.run.termination.max_iterations == 40
        assert [r.clause_id for r in c.runners][-1] == "smoke"
        assert c.runners[0].command[0].endswith("python3") or "python" in c.runners[0].command[0]

    def test_demands(self, tmp_path):
        doc = {"artifact": str(SAMPLE / "calc"),
               "spec": [{"id": "a", "kind": "test"}],
               "runners": [{"clause": "a", "builtin": "python_compiles"}],
               "demands": [{"at_iteration": 3, "clauses": [{"id": "w", "kind": "structural"}],
                            "runners": [{"clause": "w", "builtin": "line_length:70"}]}]}
        c = configmod.build(doc)
        assert c.demands[0].at_iteration == 3 and c.demands[0].runners[0].clause_id == "w"

    def test_demand_without_runner(self):
        doc = {"artifact": str(SAMPLE / "calc"), "spec": [{"id": "a", "kind": "test"}],
               "runners": [{"clause": "a", "builtin": "python_compiles"}],
               "demands": [{"at_iteration": 3, "clauses": [{"id": "w", "kind": "verify"}]}]}
        with pytest.raises(configmod.ConfigError, match="'w' has no runner"):
            configmod.build(doc)

    def test_fixture_and_artifact_exclusive(self):
        with pytest.raises(configmod.ConfigError, match="exactly one"):
            configmod.build({"fixture": "S1", "artifact": "."})

    def test_synthetic_generator_needs_fixture(self):
        doc = {"artifact": str(SAMPLE / "calc"), "spec": [{"id": "a", "kind": "test"}],
               "runners": [{"clause": "a", "builtin": "python_compiles"}],
               "generator": {"kind": "synthetic"}}
        with pytest.raises(configmod.ConfigError, match="generator.kind"):
            configmod.build(doc)

    def test_snapshot_roundtrip(self, tmp_path):
        c = configmod.load(SAMPLE / "refine.yaml")
        (tmp_path / "snap.yaml").write_text(configmod.dump(c))
        again = configmod.load(tmp_path / "snap.yaml")
        assert again.base.digest() == c.base.digest() and again.run == c.run
