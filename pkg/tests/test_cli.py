import json
import re

import pytest

from fairgkd import __version__
from fairgkd.cli import build_parser, main
from fairgkd.graph import load_dataset_dir

FAST = ["--epochs", "20", "--hidden", "8", "--lr", "0.01"]


def _error(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    return json.loads(lines[-1])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "synth"
    assert main(["synth", "--seed", "3", "--num-nodes", "120", "--avg-degree", "4", "--out", str(out)]) == 0
    return out


def _subparsers():
    parser = build_parser()
    action = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    return action.choices


class TestHelp:
    def test_every_flag_documents_default_and_source(self):
        for name, sub in _subparsers().items():
            for action in sub._actions:
                if action.dest == "help":
                    continue
                assert re.search(r"\(default: .*; source: (published|repo)\)", action.help), (name, action.dest)

    def test_published_defaults(self):
        text = _subparsers()["train"].format_help()
        flat = " ".join(text.split())
        assert "epochs per stage (default: 1000; source: published)" in flat
        assert "hidden width (default: 16; source: published)" in flat

    def test_help_exits_cleanly(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--help"])
        assert exc.value.code == 0
        assert "--with-sensitive" in capsys.readouterr().out


class TestExitCodes:
    def test_usage(self, capsys):
        assert main(["train", "--backbone", "gat"]) == 1
        assert _error(capsys)["error"] == "usage"
        assert main([]) == 1

    def test_missing_dataset_is_data_error(self, tmp_path, capsys):
        assert main(["prepare", "--dataset", str(tmp_path / "nope")]) == 2
        assert _error(capsys)["error"] == "data"

    def test_malformed_edge_line(self, dataset, tmp_path, capsys):
        bad = tmp_path / "bad"
        bad.mkdir()
        for f in dataset.iterdir():
            (bad / f.name).write_bytes(f.read_bytes())
        edges = (bad / "edges.txt").read_text().splitlines()
        edges[2] = "0 x"
        (bad / "edges.txt").write_text("\n".join(edges) + "\n")
        assert main(["prepare", "--dataset", str(bad)]) == 2
        assert "edges.txt:3:" in _error(capsys)["message"]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_training_failure(self, dataset, tmp_path, capsys):
        code = main(["train", "--dataset", str(dataset), "--out", str(tmp_path), "--seed", "0", "--epochs", "5", "--lr", "1e300"])
        assert code == 3
        assert _error(capsys)["error"] == "training"

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"epochs": 3, "learning_rate": 0.1}))
        assert main(["train", "--config", str(cfg)]) == 1
        assert "learning_rate" in _error(capsys)["message"]


class TestPrepareAndSynth:
    def test_summary(self, dataset, capsys):
        assert main(["prepare", "--dataset", str(dataset)]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["nodes"] == 120
        assert (dataset / "generator.json").is_file()

    def test_round_trip(self, dataset, tmp_path):
        assert main(["prepare", "--dataset", str(dataset), "--out", str(tmp_path / "copy")]) == 0
        a, b = load_dataset_dir(dataset), load_dataset_dir(tmp_path / "copy")
        assert (a.adjacency != b.adjacency).nnz == 0
        assert a.attributes.tobytes() == b.attributes.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()
        assert a.feature_names == b.feature_names

    def test_yaml_config(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text(f"seed: 2\nout: {tmp_path / 'y'}\nsynthetic:\n  num_nodes: 90\n  avg_degree: 4.0\n")
        assert main(["synth", "--config", str(cfg)]) == 0
        gen = json.loads((tmp_path / "y" / "generator.json").read_text())
        assert gen["seed"] == 2 and gen["num_nodes"] == 90


class TestSettings:
    def test_flag_beats_file(self, dataset, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"epochs": 7, "hidden": 4, "out": str(tmp_path / "from_file")}))
        out = tmp_path / "from_flag"
        argv = ["baseline", "--config", str(cfg), "--dataset", str(dataset), "--strategy", "full", "--seed", "0", "--epochs", "3", "--out", str(out)]
        assert main(argv) == 0
        snap = json.loads((out / "full" / "config.json").read_text())
        assert snap["train"]["epochs"] == 3 and snap["train"]["hidden"] == 4
        assert not (tmp_path / "from_file").exists()

    def test_output_root_precedence(self, dataset, tmp_path, monkeypatch):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"out": str(tmp_path / "file_out"), "epochs": 2, "hidden": 4}))
        monkeypatch.setenv("FAIRGKD_OUT", str(tmp_path / "env_out"))
        argv = ["baseline", "--config", str(cfg), "--dataset", str(dataset), "--strategy", "full", "--seed", "0"]
        assert main(argv) == 0
        assert (tmp_path / "env_out" / "full" / "report.json").is_file()
        monkeypatch.delenv("FAIRGKD_OUT")
        assert main(argv) == 0
        assert (tmp_path / "file_out" / "full" / "report.json").is_file()

    def test_report_carries_hash_and_version(self, dataset, tmp_path):
        out = tmp_path / "r"
        assert main(["baseline", "--dataset", str(dataset), "--strategy", "vanilla", "--seeds", "0,1", "--out", str(out), *FAST]) == 0
        report = json.loads((out / "full" / "report.json").read_text())
        assert report["meta"]["version"] == __version__
        assert len(report["meta"]["config_hash"]) == 16
        assert [r["seed"] for r in report["runs"]] == [0, 1]


class TestCommands:
    def test_three_strategy_bundle(self, dataset, tmp_path, capsys):
        assert main(["baseline", "--dataset", str(dataset), "--seed", "0", "--out", str(tmp_path), *FAST]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert set(doc) == {"full", "nodes-only", "topology-only"}
        keys = {tuple(sorted(v)) for v in doc.values()}
        assert len(keys) == 1
        for s in doc:
            assert (tmp_path / s / "summary.csv").is_file()

    def test_train_twice_is_byte_identical(self, dataset, tmp_path):
        for name in ("a", "b"):
            assert main(["train", "--dataset", str(dataset), "--seeds", "0,1", "--out", str(tmp_path / name), *FAST]) == 0
        for doc in ("report.json", "summary.csv", "seed_0/metrics.json", "seed_1/metrics.json"):
            assert (tmp_path / "a" / doc).read_bytes() == (tmp_path / "b" / doc).read_bytes()

    @pytest.mark.parametrize("command", ["train", "baseline"])
    def test_evaluate_reproduces_stored_metrics(self, dataset, tmp_path, capsys, command):
        extra = ["--strategy", "full"] if command == "baseline" else []
        out = tmp_path / "run"
        assert main([command, "--dataset", str(dataset), "--seeds", "0,2", "--out", str(out), *extra, *FAST]) == 0
        run = out / "full" if command == "baseline" else out
        capsys.readouterr()
        assert main(["evaluate", "--dataset", str(dataset), "--run", str(run)]) == 0
        assert json.loads(capsys.readouterr().out)["matches_stored"] is True
        stored = json.loads((run / "report.json").read_text())
        fresh = json.loads((run / "evaluation_test.json").read_text())
        assert fresh["runs"] == stored["runs"]

    def test_evaluate_non_run_dir(self, dataset, tmp_path, capsys):
        assert main(["evaluate", "--dataset", str(dataset), "--run", str(tmp_path)]) == 2
        assert _error(capsys)["error"] == "data"
