import json
import subprocess
import sys

import pytest

from erc.cli import main
from erc.pipeline import ExperimentConfig, RunLock, apply_overrides, run_pipeline
from erc.errors import ConfigError

TINY_MODEL = {"d_model": 8, "n_heads": 2, "n_layers": 1, "d_ff": 16, "dropout": 0.0}
TINY_TRAIN = {"epochs": 1, "peak_lr": 0.003, "batch_size": 16}
TINY_SYNTH = {"rule": "content_only", "dialogues": {"train": 12, "val": 4, "test": 4}, "max_turns": 4}


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "synth.json").write_text(json.dumps(TINY_SYNTH))
    (tmp_path / "conf.json").write_text(json.dumps({"model": TINY_MODEL, "train": TINY_TRAIN}))
    return tmp_path


def run(*args):
    return main([str(a) for a in args])


def test_command_chain(workdir, capsys):
    w = workdir
    assert run("synth", "--config", w / "synth.json", "--seed", 1, "--out", w / "corpus.jsonl") == 0
    assert run("stats", "--in", w / "corpus.jsonl") == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["train"]["dialogues"] == 12
    assert run("ingest", "--in", w / "corpus.jsonl", "--out", w / "again.jsonl") == 0
    assert (w / "again.jsonl").read_text() == (w / "corpus.jsonl").read_text()
    assert run("tokenizer", "train", "--in", w / "corpus.jsonl", "--size", 350, "--out", w / "vocab.json") == 0
    assert run("build", "--in", w / "corpus.jsonl", "--vocab", w / "vocab.json", "--mode", "none",
               "--max-tokens", 64, "--out", w / "packed") == 0
    assert (w / "packed" / "packed.meta.json").exists()
    assert run("train", "--packed", w / "packed", "--config", w / "conf.json", "--seed", 2, "--out", w / "run") == 0
    result = json.loads(capsys.readouterr().out)
    assert result["seed"] == 2 and (w / "run" / "best.ckpt").exists()
    assert run("eval", "--checkpoint", w / "run" / "best.ckpt", "--packed", w / "packed", "--out", w / "eval.json") == 0
    assert "weighted f1 on test" in capsys.readouterr().out
    assert json.loads((w / "eval.json").read_text())["n_examples"] > 0
    assert run("inspect", "--checkpoint", w / "run" / "best.ckpt", "--packed", w / "packed", "--n-correct", 0,
               "--n-incorrect", 1, "--out", w / "reports") == 0
    assert len(list((w / "reports").glob("*.html"))) == 1
    assert run("lr-search", "--packed", w / "packed", "--config", w / "conf.json", "--trials", 2, "--low", 1e-3,
               "--high", 1e-2, "--out", w / "lr.json") == 0
    assert len(json.loads((w / "lr.json").read_text())["trials"]) == 2
    spec = {"corpus": str(w / "corpus.jsonl"), "vocab": str(w / "vocab.json"), "build": {"max_total_tokens": 64},
            "model": TINY_MODEL, "train": TINY_TRAIN, "cells": [{"mode": "none"}, {"mode": "both"}], "seeds": 1}
    (w / "spec.json").write_text(json.dumps(spec))
    assert run("ablate", "--spec", w / "spec.json", "--out", w / "table.md") == 0
    assert "| past + future context |" in (w / "table.md").read_text()


def test_exit_codes(workdir, capsys):
    w = workdir
    assert run("stats", "--in", w / "missing.jsonl") == 4
    assert run("synth", "--config", w / "nope.json", "--out", w / "x.jsonl") == 3
    (w / "bad.jsonl").write_text("{broken\n")
    assert run("stats", "--in", w / "bad.jsonl") == 4
    assert "bad.jsonl:1" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        run("build", "--in", "x")
    assert exc.value.code == 2


def test_pipeline_missing_corpus_creates_nothing(tmp_path):
    conf = {"run_dir": str(tmp_path / "run"), "corpus": {"path": str(tmp_path / "missing.jsonl")}}
    (tmp_path / "p.json").write_text(json.dumps(conf))
    assert run("pipeline", "--config", tmp_path / "p.json") == 3
    assert not (tmp_path / "run").exists()


def test_pipeline_manifest_and_lock(tmp_path):
    conf = {
        "run_dir": str(tmp_path / "run"),
        "corpus": {"synthetic": TINY_SYNTH, "seed": 0},
        "tokenizer": {"size": 350},
        "build": {"max_total_tokens": 64, "mode": "none"},
        "model": TINY_MODEL,
        "train": TINY_TRAIN,
        "inspect": {"n_correct": 2, "n_incorrect": 2},
    }
    run_dir = run_pipeline(ExperimentConfig.from_dict(conf))
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert [s["name"] for s in manifest["stages"]] == ["ingest", "tokenizer", "build", "train", "eval", "inspect"]
    metrics = json.loads((run_dir / "metrics.json").read_text())
    assert {"test_f1", "mean_test_f1", "speaker_attention"} <= set(metrics)
    assert not (run_dir / ".lock").exists()
    with RunLock(run_dir):
        with pytest.raises(ConfigError, match="lock"):
            run_pipeline(ExperimentConfig.from_dict(conf))


def test_pipeline_records_failed_stage(tmp_path):
    conf = {
        "run_dir": str(tmp_path / "run"),
        "corpus": {"synthetic": TINY_SYNTH},
        "tokenizer": {"size": 10},  # below the byte alphabet: the tokenizer stage fails
    }
    with pytest.raises(ConfigError):
        run_pipeline(ExperimentConfig.from_dict(conf))
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["status"] == "failed" and manifest["failed_stage"] == "tokenizer"


def test_overrides():
    d = apply_overrides({"train": {"epochs": 5}}, ["train.epochs=2", "build.mode=none", "seeds=[1,2]"])
    assert d == {"train": {"epochs": 2}, "build": {"mode": "none"}, "seeds": [1, 2]}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"run_dir": "x", "corpus": {"synthetic": {}}, "build": {"bogus": 1}})


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "erc.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "pipeline" in out.stdout
