from __future__ import annotations

import json
import os

import pytest

from ship import cli
from ship import corpus as cp
from ship import models as md

TINY = ["--d-model", "16", "--m-soft", "2", "--n-layers", "1",
        "--n-heads", "2", "--d-ff", "32"]


def _small_split():
    # ten tasks -> nine seen + one unseen under the 90/10 split
    tasks = [cp.TaskProgram(cp.REVERSE, (), 16),
             cp.TaskProgram(cp.DUPLICATE, (), 16),
             cp.TaskProgram(cp.SORT, (), 16)]
    tasks += [cp.TaskProgram(cp.SHIFT, (n,), 16) for n in range(1, 8)]
    return cp.build_split(tasks, train_per_task=8, seed=0)


@pytest.fixture(scope="module")
def corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "corpus.txt"
    cp.save_corpus(_small_split(), path)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, corpus_path):
    out = tmp_path_factory.mktemp("trained")
    rc = cli.main(["train", "--corpus", str(corpus_path), "--epochs", "2",
                   "--out-dir", str(out), "--seed", "0", *TINY])
    assert rc == 0
    return out


class TestGen:
    def test_writes_corpus_and_manifest(self, tmp_path):
        rc = cli.main(["gen", "--out-dir", str(tmp_path), "--seed", "0"])
        assert rc == 0
        split = cp.load_corpus(tmp_path / "corpus.txt")
        assert len(split.tasks) >= 60
        manifest = json.loads((tmp_path / "manifest-gen.json").read_text())
        assert manifest["command"] == "gen"
        assert manifest["corpus_hash"] == cp.split_hash(split)
        assert manifest["seeds"] == [0]

    def test_deterministic(self, tmp_path):
        for sub in ("a", "b"):
            rc = cli.main(["gen", "--out-dir", str(tmp_path / sub),
                           "--seed", "7"])
            assert rc == 0
        assert ((tmp_path / "a" / "corpus.txt").read_bytes()
                == (tmp_path / "b" / "corpus.txt").read_bytes())

    def test_rejects_small_alphabet(self, tmp_path, capsys):
        rc = cli.main(["gen", "--out-dir", str(tmp_path), "--alphabet", "4"])
        assert rc == 1
        assert "alphabet" in capsys.readouterr().err


class TestConfigFile:
    def test_flag_beats_config_file(self, tmp_path, corpus_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("epochs = 3\nbatch-size = 4  # comment\n")
        rc = cli.main(["train", "--corpus", str(corpus_path),
                       "--config", str(cfg), "--epochs", "1",
                       "--out-dir", str(tmp_path), *TINY])
        assert rc == 0
        manifest = json.loads((tmp_path / "manifest-train.json").read_text())
        assert manifest["config"]["epochs"] == 1  # explicit flag wins
        assert manifest["config"]["batch_size"] == 4  # from the file

    def test_unknown_key_rejected(self, tmp_path, corpus_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("warp_speed = 9\n")
        rc = cli.main(["train", "--corpus", str(corpus_path),
                       "--config", str(cfg), "--out-dir", str(tmp_path)])
        assert rc == 1
        assert "warp_speed" in capsys.readouterr().err

    def test_malformed_line_rejected(self, tmp_path, corpus_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("epochs\n")
        rc = cli.main(["train", "--corpus", str(corpus_path),
                       "--config", str(cfg), "--out-dir", str(tmp_path)])
        assert rc == 1


class TestTrain:
    def test_artifacts(self, trained):
        for name in ("checkpoint.bin", "loss.csv", "loss-curve.svg",
                     "manifest-train.json"):
            assert (trained / name).exists()
        svg = (trained / "loss-curve.svg").read_text()
        assert svg.count("<polyline") == 3

    def test_checkpoint_loads_and_records_hash(self, trained, corpus_path):
        bundle, header, _ = md.load_checkpoint(trained / "checkpoint.bin")
        split = cp.load_corpus(corpus_path)
        assert header["extra"]["corpus_hash"] == cp.split_hash(split)
        assert bundle.config.d_model == 16

    def test_resume_equals_uninterrupted(self, tmp_path, corpus_path):
        base = ["train", "--corpus", str(corpus_path), "--seed", "1", *TINY]
        rc = cli.main(base + ["--epochs", "2", "--out-dir",
                              str(tmp_path / "full")])
        assert rc == 0
        rc = cli.main(base + ["--epochs", "1", "--out-dir",
                              str(tmp_path / "half")])
        assert rc == 0
        rc = cli.main(base + ["--epochs", "2", "--out-dir",
                              str(tmp_path / "half"), "--resume",
                              str(tmp_path / "half" / "checkpoint.bin")])
        assert rc == 0
        assert ((tmp_path / "full" / "checkpoint.bin").read_bytes()
                == (tmp_path / "half" / "checkpoint.bin").read_bytes())

    def test_ablation_flag_shapes_model(self, tmp_path, corpus_path):
        rc = cli.main(["train", "--corpus", str(corpus_path), "--epochs", "1",
                       "--out-dir", str(tmp_path), "--no-k-cond", *TINY])
        assert rc == 0
        bundle, _, _ = md.load_checkpoint(tmp_path / "checkpoint.bin")
        assert not bundle.config.task_conditioned
        manifest = json.loads((tmp_path / "manifest-train.json").read_text())
        assert manifest["config"]["drop_k_condition"] is True


@pytest.fixture(scope="module")
def ded_dir(tmp_path_factory, trained, corpus_path):
    out = tmp_path_factory.mktemp("ded")
    rc = cli.main(["eval", "deduction", "--checkpoint",
                   str(trained / "checkpoint.bin"), "--corpus",
                   str(corpus_path), "--out-dir", str(out)])
    assert rc == 0
    return out


class TestEvalDeduction:
    def test_outputs(self, ded_dir):
        for name in ("deduction-records.jsonl", "deduction.csv",
                     "deduction.txt", "manifest-eval-deduction.json"):
            assert (ded_dir / name).exists()

    def test_rows_cover_methods_and_splits(self, ded_dir):
        lines = (ded_dir / "deduction.csv").read_text().strip().split("\n")
        combos = {tuple(line.split(",")[1:3]) for line in lines[1:]}
        assert ("seen", "deduce") in combos
        assert ("seen", "zero-z") in combos
        assert ("unseen", "deduce") in combos

    def test_record_counts(self, ded_dir, corpus_path):
        split = cp.load_corpus(corpus_path)
        n_lines = len((ded_dir / "deduction-records.jsonl")
                      .read_text().strip().split("\n"))
        assert n_lines == len(split.tasks) * 5 * 2

    def test_parallel_matches_serial(self, tmp_path_factory, trained,
                                     corpus_path, ded_dir):
        out = tmp_path_factory.mktemp("ded2")
        rc = cli.main(["eval", "deduction", "--checkpoint",
                       str(trained / "checkpoint.bin"), "--corpus",
                       str(corpus_path), "--out-dir", str(out),
                       "--jobs", "2"])
        assert rc == 0
        assert ((out / "deduction.csv").read_bytes()
                == (ded_dir / "deduction.csv").read_bytes())
        assert ((out / "deduction-records.jsonl").read_bytes()
                == (ded_dir / "deduction-records.jsonl").read_bytes())

    def test_checkpoint_corpus_mismatch(self, tmp_path, trained, capsys):
        other = tmp_path / "other.txt"
        cp.save_corpus(cp.build_split(_small_split().tasks,
                                      train_per_task=8, seed=9), other)
        rc = cli.main(["eval", "deduction", "--checkpoint",
                       str(trained / "checkpoint.bin"), "--corpus",
                       str(other), "--out-dir", str(tmp_path)])
        assert rc == 1
        assert "corpus" in capsys.readouterr().err


class TestEvalInduction:
    def test_outputs_and_method_names(self, tmp_path, trained, corpus_path):
        rc = cli.main(["eval", "induction", "--checkpoint",
                       str(trained / "checkpoint.bin"), "--corpus",
                       str(corpus_path), "--out-dir", str(tmp_path),
                       "--induce-steps", "4", "--n-demos", "2"])
        assert rc == 0
        csv = (tmp_path / "induction.csv").read_text()
        assert "indirect-n2" in csv
        lines = [json.loads(l) for l in (tmp_path / "induction-induced.jsonl")
                 .read_text().strip().split("\n")]
        split = cp.load_corpus(corpus_path)
        assert {l["task_id"] for l in lines} == {t.task_id for t in split.tasks}
        assert all(l["n"] == 2 and "k_hat" in l and "seed" in l
                   for l in lines)

    def test_direct_z_ablation_method_name(self, tmp_path, trained,
                                           corpus_path):
        rc = cli.main(["eval", "induction", "--checkpoint",
                       str(trained / "checkpoint.bin"), "--corpus",
                       str(corpus_path), "--out-dir", str(tmp_path),
                       "--induce-steps", "4", "--n-demos", "1",
                       "--no-indirect"])
        assert rc == 0
        assert "direct-z-n1" in (tmp_path / "induction.csv").read_text()


class TestEvalReasoning:
    def test_three_methods(self, tmp_path, trained, corpus_path):
        rc = cli.main(["eval", "reasoning", "--checkpoint",
                       str(trained / "checkpoint.bin"), "--corpus",
                       str(corpus_path), "--out-dir", str(tmp_path),
                       "--induce-steps", "4"])
        assert rc == 0
        csv = (tmp_path / "reasoning.csv").read_text()
        for method in ("sft", "refined", "context"):
            assert method in csv


class TestAnalyze:
    def test_outputs(self, tmp_path, trained, corpus_path):
        rc = cli.main(["analyze", "--checkpoint",
                       str(trained / "checkpoint.bin"), "--corpus",
                       str(corpus_path), "--out-dir", str(tmp_path),
                       "--induce-steps", "4"])
        assert rc == 0
        for name in ("latents.csv", "latents.svg", "distance-report.txt",
                     "manifest-analyze.json"):
            assert (tmp_path / name).exists()
        report = (tmp_path / "distance-report.txt").read_text()
        assert "refined" in report

    def test_tasks_floor(self, tmp_path, trained, corpus_path, capsys):
        rc = cli.main(["analyze", "--checkpoint",
                       str(trained / "checkpoint.bin"), "--corpus",
                       str(corpus_path), "--out-dir", str(tmp_path),
                       "--tasks", "3"])
        assert rc == 1
        assert "5" in capsys.readouterr().err


class TestUsage:
    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["frobnicate"])
        assert err.value.code == 2

    def test_missing_required_flag_exits_2(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["train"])
        assert err.value.code == 2

    def test_out_dir_env_default(self, monkeypatch, tmp_path):
        monkeypatch.setenv("SHIP_OUT_DIR", str(tmp_path / "envout"))
        parser = cli.build_parser()
        args = parser.parse_args(["gen"])
        assert args.out_dir == str(tmp_path / "envout")

    def test_task_seed_stable_and_distinct(self):
        a = cli.task_seed(0, "SHIFT:3")
        assert a == cli.task_seed(0, "SHIFT:3")
        assert a != cli.task_seed(0, "SHIFT:4")
        assert a != cli.task_seed(1, "SHIFT:3")
