import json
import signal
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from tastemix.cli import main
from tastemix.config import load_config, load_dataset, parse_config, parse_synthetic, prepare_splits
from tastemix.data import compute_stats, load_interactions
from tastemix.errors import ConfigError

SYNTH = "synthetic:mixture:n_users=120,n_items=40,n_tastes=4,interactions_per_user=12"


def write_config(path: Path, **overrides) -> Path:
    cfg = {
        "schema_version": 1,
        "seed": 3,
        "dataset": SYNTH,
        "protocol": "factorization",
        "model": {"variant": "emf", "k": 4, "m": 2, "n_epochs": 2, "batch_size": 64},
        "search": {"variant": "emf", "budget": 3, "space": {"k": 4, "n_epochs": [1, 2], "batch_size": [64]}},
    }
    cfg.update(overrides)
    path.write_text(yaml.safe_dump(cfg))
    return path


def read_tree(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestConfig:
    def test_roundtrip(self, tmp_path):
        cfg = load_config(write_config(tmp_path / "c.yaml"))
        again = parse_config(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()

    def test_protocol_variant_mismatch(self):
        with pytest.raises(ConfigError):
            parse_config({"schema_version": 1, "dataset": SYNTH, "protocol": "sequence",
                          "model": {"variant": "emf"}})

    def test_schema_version_required(self):
        with pytest.raises(ConfigError):
            parse_config({"dataset": SYNTH, "protocol": "factorization"})

    def test_unknown_keys(self):
        with pytest.raises(ConfigError):
            parse_config({"schema_version": 1, "dataset": SYNTH, "protocol": "factorization", "gpu": 1})

    def test_descriptor(self):
        kind, kw = parse_synthetic("synthetic:markov:n_users=5,noise=0.2")
        assert kind == "markov" and kw == {"n_users": 5, "noise": 0.2}
        with pytest.raises(ConfigError):
            parse_synthetic("synthetic:mixture:colour=3")

    def test_relative_dataset_path(self, tmp_path):
        (tmp_path / "d.csv").write_text("user_id,item_id\na,x\nb,y\n")
        cfg = load_config(write_config(tmp_path / "c.yaml", dataset="d.csv"))
        assert len(load_dataset(cfg)) == 2

    def test_sequence_splits(self, tmp_path):
        raw = {"schema_version": 1, "dataset": "synthetic:markov:n_users=50,n_items=20,n_tastes=2,seq_len=9",
               "protocol": "sequence", "max_len": 6}
        train, val, test = prepare_splits(parse_config(raw))
        assert train.max_len == 6 and len(train) + len(val) + len(test) == 50


class TestCommands:
    def test_mismatch_exits_2_before_work(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.yaml", protocol="sequence")
        out = tmp_path / "out"
        assert main(["fit", "--config", str(cfg), "--out", str(out)]) == 2
        assert not out.exists()
        assert "config error" in capsys.readouterr().err

    def test_missing_config_exits_2(self, tmp_path):
        assert main(["fit", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "o")]) == 2

    def test_bad_cli_usage_exits_2(self):
        assert main(["fit"]) == 2

    def test_fit_artifacts(self, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["fit", "--config", str(write_config(tmp_path / "c.yaml")), "--out", str(out)]) == 0
        names = sorted(p.name for p in out.iterdir())
        assert names == ["checkpoint.bin", "config.json", "eval.json", "train_log.jsonl", "val_eval.json"]
        result = json.loads(capsys.readouterr().out)
        assert result == json.loads((out / "eval.json").read_text())
        assert len((out / "train_log.jsonl").read_text().splitlines()) == 2

    def test_fit_untrained_matches_random_expectation(self, tmp_path):
        model = {"variant": "mf", "k": 8, "n_epochs": 0}
        dataset = "synthetic:mixture:n_users=600,n_items=60,n_tastes=4,interactions_per_user=15"
        cfg_path = write_config(tmp_path / "c.yaml", model=model, dataset=dataset, split=[0.5, 0.1, 0.4])
        assert main(["fit", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 0
        got = json.loads((tmp_path / "o" / "eval.json").read_text())["mrr"]
        train, _, test = prepare_splits(load_config(cfg_path))
        known = train.user_items()
        # an untrained scorer puts the target uniformly among the items left after exclusion
        means, variances = [], []
        for u, j in zip(test.users, test.items):
            live = train.n_items - len(set(known[u].tolist()) - {j})
            rr = 1 / np.arange(1, live + 1)
            means.append(rr.mean())
            variances.append(rr.var())
        sd = np.sqrt(np.sum(variances)) / len(means)
        assert abs(got - np.mean(means)) < 3 * sd

    def test_refuses_non_empty_out(self, tmp_path):
        cfg = str(write_config(tmp_path / "c.yaml"))
        out = tmp_path / "out"
        out.mkdir()
        (out / "keep.txt").write_text("x")
        assert main(["fit", "--config", cfg, "--out", str(out)]) == 2
        assert (out / "keep.txt").exists()
        assert main(["fit", "--config", cfg, "--out", str(out), "--force"]) == 0
        assert not (out / "keep.txt").exists()

    def test_fit_deterministic(self, tmp_path):
        cfg = str(write_config(tmp_path / "c.yaml"))
        for name in ("a", "b"):
            assert main(["fit", "--config", cfg, "--out", str(tmp_path / name)]) == 0
        assert read_tree(tmp_path / "a") == read_tree(tmp_path / "b")

    def test_seed_override_changes_run(self, tmp_path):
        cfg = str(write_config(tmp_path / "c.yaml"))
        assert main(["fit", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        assert main(["fit", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "4"]) == 0
        assert read_tree(tmp_path / "a") != read_tree(tmp_path / "b")

    def test_search(self, tmp_path, capsys):
        out = tmp_path / "s"
        assert main(["search", "--config", str(write_config(tmp_path / "c.yaml")), "--out", str(out)]) == 0
        best = json.loads(capsys.readouterr().out)
        assert len((out / "records.jsonl").read_text().splitlines()) == 3
        curve = (out / "curve.csv").read_text().splitlines()
        assert curve[0] == "iteration,best_test_mrr" and 1 <= len(curve) - 1 <= 3
        assert best["config"]["variant"] == "emf"
        assert main(["export-curve", "--records", str(out / "records.jsonl")]) == 0
        assert capsys.readouterr().out.splitlines() == curve

    def test_search_deterministic(self, tmp_path):
        cfg = str(write_config(tmp_path / "c.yaml"))
        for name in ("a", "b"):
            assert main(["search", "--config", cfg, "--out", str(tmp_path / name)]) == 0
        assert read_tree(tmp_path / "a") == read_tree(tmp_path / "b")

    def test_stats(self, tmp_path, capsys):
        path = tmp_path / "d.csv"
        path.write_text("user_id,item_id\n1,1\n1,2\n2,1\n2,2\n")
        assert main(["stats", str(path)]) == 0
        assert json.loads(capsys.readouterr().out)["density"] == 1.0

    def test_stats_passthrough(self, tmp_path, capsys):
        assert main(["synth", SYNTH, "--out", str(tmp_path / "d"), "--seed", "2"]) == 0
        csv_path = Path(capsys.readouterr().out.strip())
        assert main(["stats", str(csv_path), "--min-user", "5", "--min-item", "5"]) == 0
        printed = json.loads(capsys.readouterr().out)
        direct = compute_stats(load_interactions(csv_path, 5, 5))
        assert printed == json.loads(direct.to_json())

    def test_stats_parse_error_exits_1(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("user_id,item_id,timestamp\n1,1,noon\n")
        assert main(["stats", str(path)]) == 1

    def test_synth_matches_generator(self, tmp_path, capsys):
        assert main(["synth", SYNTH, "--out", str(tmp_path / "d"), "--seed", "2"]) == 0
        data = load_interactions(tmp_path / "d" / "interactions.csv", dedupe=False)
        blocks = json.loads((tmp_path / "d" / "blocks.json").read_text())["blocks"]
        assert len(data) == 120 * 12 and len(blocks) == 120
        assert main(["synth", "data.csv", "--out", str(tmp_path / "e")]) == 2


def _spawn(args):
    return subprocess.Popen([sys.executable, "-m", "tastemix.cli", *args],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE)


@pytest.mark.slow
def test_kill_and_resume(tmp_path):
    cfg = write_config(
        tmp_path / "c.yaml",
        dataset="synthetic:mixture:n_users=400,n_items=80,n_tastes=4,interactions_per_user=20",
        search={"variant": "emf", "budget": 5, "space": {"k": 4, "n_epochs": [8], "batch_size": [64]}},
    )
    out = tmp_path / "s"
    records = out / "records.jsonl"
    proc = _spawn(["search", "--config", str(cfg), "--out", str(out)])
    deadline = time.time() + 120
    while time.time() < deadline:
        if records.exists() and records.read_text().count("\n") >= 2:
            break
        time.sleep(0.05)
    proc.send_signal(signal.SIGKILL)
    proc.wait()
    done_before = records.read_text().count("\n")
    assert 2 <= done_before < 5
    assert main(["search", "--config", str(cfg), "--out", str(out), "--resume"]) == 0
    iterations = [json.loads(line)["iteration"] for line in records.read_text().splitlines()]
    assert iterations == [0, 1, 2, 3, 4]
    fresh = tmp_path / "fresh"
    assert main(["search", "--config", str(cfg), "--out", str(fresh)]) == 0
    assert records.read_bytes() == (fresh / "records.jsonl").read_bytes()
