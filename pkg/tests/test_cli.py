"""CLI behaviour: exit codes, subcommand wiring, provenance headers."""

import json

import pytest

from agentsearch.cli import EXIT_BACKEND, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, run
from agentsearch.model import (
    Document,
    read_trajectories,
    write_corpus,
    write_qa_examples,
)

from synthetic import make_corpus, make_qa, write_fixture_set


@pytest.fixture(scope="module")
def fixture_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("fixtures")
    paths = write_fixture_set(root, corpus_size=40, n_qa=4)
    assert run(["--config", str(paths["config"]), "index",
                "--corpus", str(paths["corpus"]), "--out", str(paths["index"]),
                "--kind", "both"]) == EXIT_OK
    return paths


class TestUsageAndConfig:
    def test_unknown_subcommand(self):
        assert run(["frobnicate"]) == EXIT_USAGE

    def test_no_subcommand(self):
        assert run([]) == EXIT_USAGE

    def test_help_exits_zero(self):
        assert run(["--help"]) == EXIT_OK

    def test_print_config(self, capsys):
        assert run(["--print-config"]) == EXIT_OK
        cfg = json.loads(capsys.readouterr().out)
        assert cfg["retriever"]["kind"] == "dense"

    def test_flag_overrides_config(self, capsys, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text('{"seed": 5, "workers": 9}')
        run(["--config", str(cfg_path), "--workers", "2", "--print-config"])
        cfg = json.loads(capsys.readouterr().out)
        assert cfg["seed"] == 5 and cfg["workers"] == 2

    def test_deterministic_forces_one_worker(self, capsys):
        run(["--deterministic", "--workers", "8", "--print-config"])
        cfg = json.loads(capsys.readouterr().out)
        assert cfg["workers"] == 1

    def test_missing_config_file(self):
        assert run(["--config", "/nonexistent/c.json", "ingest", "--corpus", "x"]) \
            == EXIT_VALIDATION


class TestIngest:
    def test_ok(self, tmp_path):
        corpus_path = tmp_path / "corpus.jsonl"
        write_corpus(corpus_path, make_corpus(n=5))
        assert run(["ingest", "--corpus", str(corpus_path)]) == EXIT_OK

    def test_duplicate_id_fails(self, tmp_path, capsys):
        from agentsearch.model import Corpus
        corpus_path = tmp_path / "corpus.jsonl"
        write_corpus(corpus_path, Corpus([Document(id="d1", text="x"),
                                          Document(id="d1", text="y")]))
        assert run(["ingest", "--corpus", str(corpus_path)]) == EXIT_VALIDATION
        assert "duplicate" in capsys.readouterr().out

    def test_qa_with_dangling_evidence(self, tmp_path):
        corpus_path = tmp_path / "corpus.jsonl"
        qa_path = tmp_path / "qa.jsonl"
        write_corpus(corpus_path, make_corpus(n=5))
        write_qa_examples(qa_path, make_qa(n=4, corpus_size=40))  # evidence beyond d004
        assert run(["ingest", "--corpus", str(corpus_path), "--qa", str(qa_path)]) \
            == EXIT_VALIDATION


class TestPipeline:
    def test_rollout_and_outputs(self, fixture_set, tmp_path):
        out = tmp_path / "traj.jsonl"
        code = run(["--config", str(fixture_set["config"]), "rollout",
                    "--qa", str(fixture_set["qa"]), "--corpus", str(fixture_set["corpus"]),
                    "--index", str(fixture_set["index"]), "--out", str(out),
                    "--max-turns", "3"])
        assert code == EXIT_OK
        trajectories = read_trajectories(out)
        assert len(trajectories) == 4
        assert all(len(t.turns) <= 3 for t in trajectories)
        assert all(t.search_calls == 2 for t in trajectories)
        header = json.loads(out.read_text().splitlines()[0])
        assert header["_config"]["agent"]["max_turns"] == 3

    def test_rollout_backend_failure_is_not_a_crash(self, fixture_set, tmp_path):
        # a script that runs out mid-episode == backend failure; episode truncates
        short = tmp_path / "short.json"
        short.write_text(json.dumps(
            {f"qa{i:02d}": ["thinking first <search>x</search>"] for i in range(4)}))
        cfg = json.loads(fixture_set["config"].read_text())
        cfg["backends"]["agent"]["path"] = str(short)
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "traj.jsonl"
        code = run(["--config", str(cfg_path), "rollout",
                    "--qa", str(fixture_set["qa"]), "--corpus", str(fixture_set["corpus"]),
                    "--index", str(fixture_set["index"]), "--out", str(out)])
        assert code == EXIT_OK
        trajectories = read_trajectories(out)
        assert all(t.failure is not None for t in trajectories)

    def test_synth_eval_analyze_chain(self, fixture_set, tmp_path):
        traj = tmp_path / "traj.jsonl"
        dataset = tmp_path / "data.jsonl"
        report = tmp_path / "report.json"
        series = tmp_path / "series.json"
        base = ["--config", str(fixture_set["config"])]

        assert run(base + ["rollout", "--qa", str(fixture_set["qa"]),
                           "--corpus", str(fixture_set["corpus"]),
                           "--index", str(fixture_set["index"]), "--out", str(traj)]) == EXIT_OK

        assert run(base + ["synth", "--qa", str(fixture_set["qa"]),
                           "--corpus", str(fixture_set["corpus"]),
                           "--index", str(fixture_set["index"]), "--out", str(dataset)]) == EXIT_OK
        stats = json.loads((tmp_path / "data.jsonl.stats.json").read_text())
        assert stats["trajectories_run"] == 4
        assert stats["kept"] == 3  # qa00, qa01, qa02 answer correctly in the fixture set
        assert stats["instances"] == stats["kept"] * 2

        assert run(base + ["eval", "--trajectories", str(traj),
                           "--qa", str(fixture_set["qa"]), "--out", str(report)]) == EXIT_OK
        payload = json.loads(report.read_text())
        assert payload["accuracy"] == pytest.approx(3 / 4)
        assert payload["mean_search_calls"] == 2.0

        assert run(base + ["analyze", "--trajectories", str(traj),
                           "--qa", str(fixture_set["qa"]), "--out", str(series)]) == EXIT_OK
        coverage = json.loads(series.read_text())["coverage"]
        assert coverage["all"] == 1.0

    def test_compose_debug_print(self, fixture_set, tmp_path, capsys):
        traj = tmp_path / "traj.jsonl"
        base = ["--config", str(fixture_set["config"])]
        run(base + ["rollout", "--qa", str(fixture_set["qa"]),
                    "--corpus", str(fixture_set["corpus"]),
                    "--index", str(fixture_set["index"]), "--out", str(traj)])
        capsys.readouterr()
        assert run(base + ["compose", "--trajectories", str(traj),
                           "--qa-id", "qa00", "--turn", "2"]) == EXIT_OK
        out = capsys.readouterr().out
        assert out.startswith("Instruction: Given a user's reasoning")
        assert "Query: Reasoning:" in out

    def test_loss_check_generate_then_verify(self, tmp_path, capsys):
        parity = tmp_path / "parity.jsonl"
        assert run(["loss-check", "--parity", str(parity), "--generate",
                    "--rows", "10", "--dim", "4"]) == EXIT_OK
        assert run(["loss-check", "--parity", str(parity)]) == EXIT_OK
        assert "max |deviation|" in capsys.readouterr().out

    def test_loss_check_missing_file(self, tmp_path):
        assert run(["loss-check", "--parity", str(tmp_path / "none.jsonl")]) \
            == EXIT_VALIDATION


class TestBackendExitCode:
    def test_unreachable_endpoint_is_exit_2(self, fixture_set, tmp_path):
        cfg = json.loads(fixture_set["config"].read_text())
        cfg["backends"]["embedder"] = {
            "kind": "openai", "base_url": "http://127.0.0.1:1",
            "model": "m", "timeout_s": 0.2, "max_attempts": 1,
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "idx"
        code = run(["--config", str(cfg_path), "index",
                    "--corpus", str(fixture_set["corpus"]), "--out", str(out),
                    "--kind", "dense"])
        assert code == EXIT_BACKEND
