"""End-to-end experiment runs: ingest, tokenizer, build, train, eval, inspect (and optionally ablate).

Everything lands under one run directory::

    config.json      effective configuration, written before any stage runs
    manifest.json    per-stage status and outputs
    corpus.jsonl     vocab.json     packed.jsonl (+ packed.meta.json)
    train/seed<N>/   config.json, metrics.jsonl, result.json, best.ckpt
    eval/            report.json
    reports/         one HTML file per inspected sample + summary.json
    ablation/        table.md, ablation.json (only when configured)
    metrics.json     seed scores, evaluation and attention summary
"""

from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from erc.attnreport import analyse, render_report, sample_for_analysis, speaker_attention_stat
from erc.corpus import SyntheticConfig, class_names, dump_jsonl, generate_synthetic, load_corpus
from erc.errors import ConfigError, ErcError
from erc.evaluation import AblationSpec, evaluate, run_ablation
from erc.model import ModelConfig, forward, read_checkpoint
from erc.seqbuilder import BuildConfig, build_dataset, by_split, save_packed
from erc.tokenizer import DEFAULT_VOCAB_SIZE, Vocab, train_vocab
from erc.training import TrainConfig, run_seeds

logger = logging.getLogger(__name__)

STAGES = ("ingest", "tokenizer", "build", "train", "eval", "inspect", "ablate")


@dataclass
class ExperimentConfig:
    run_dir: str
    corpus: dict
    tokenizer: dict = field(default_factory=lambda: {"size": DEFAULT_VOCAB_SIZE})
    build: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])
    inspect: dict = field(default_factory=lambda: {"n_correct": 10, "n_incorrect": 10, "seed": 0, "top_k": 10})
    ablation: dict | None = None

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(f"experiment config: {exc}") from None
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return copy.deepcopy(self.__dict__)

    def validate(self) -> None:
        if "synthetic" not in self.corpus:
            path = self.corpus.get("path")
            if not path:
                raise ConfigError("corpus needs either 'path' or 'synthetic'")
            if not Path(path).exists():
                raise ConfigError(f"corpus path {path} does not exist")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        # Constructing the typed configs surfaces bad keys before any file is written.
        build_config(self.build)
        TrainConfig.from_dict(self.train)
        if self.ablation is not None:
            AblationSpec.from_dict(self.ablation)


def build_config(d: dict) -> BuildConfig:
    try:
        return BuildConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"build config: {exc}") from None


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values parse as JSON when possible."""
    d = copy.deepcopy(d)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {p} is not a section")
        node[leaf] = value
    return d


class RunLock:
    def __init__(self, run_dir: Path):
        self.path = run_dir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"{self.path.parent} is locked by another process (remove {self.path} if stale)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


class Manifest:
    def __init__(self, run_dir: Path):
        self.path = run_dir / "manifest.json"
        self.data = {"status": "running", "failed_stage": None, "stages": []}

    def record(self, name: str, status: str, outputs: list[str], error: str | None = None) -> None:
        entry = {"name": name, "status": status, "outputs": outputs}
        if error:
            entry["error"] = error
        self.data["stages"].append(entry)
        if status == "failed":
            self.data["status"] = "failed"
            self.data["failed_stage"] = name
        self.write()

    def finish(self) -> None:
        if self.data["status"] == "running":
            self.data["status"] = "ok"
        self.write()

    def write(self) -> None:
        self.path.write_text(json.dumps(self.data, indent=2), encoding="utf-8")


def model_config_for(overrides: dict, vocab_size: int, n_classes: int, max_tokens: int) -> ModelConfig:
    d = {"max_positions": max_tokens, **overrides, "vocab_size": vocab_size, "n_classes": n_classes}
    return ModelConfig.from_dict(d)


def run_pipeline(config: ExperimentConfig) -> Path:
    """Run every stage; on failure the manifest names the failed stage and the error is re-raised."""
    config.validate()
    run_dir = Path(config.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with RunLock(run_dir):
        (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2), encoding="utf-8")
        manifest = Manifest(run_dir)
        state: dict = {}
        stages = [s for s in STAGES if s != "ablate" or config.ablation is not None]
        for name in stages:
            try:
                outputs = _STAGE_FUNCS[name](config, run_dir, state)
            except ErcError as exc:
                manifest.record(name, "failed", [], str(exc))
                raise
            manifest.record(name, "ok", outputs)
        manifest.finish()
    return run_dir


def _ingest(config, run_dir, state):
    c = config.corpus
    if "synthetic" in c:
        dialogues = generate_synthetic(SyntheticConfig.from_dict(c["synthetic"]), int(c.get("seed", 0)))
    else:
        dialogues = load_corpus(c["path"], c.get("format", "native_jsonl"))
    dump_jsonl(dialogues, run_dir / "corpus.jsonl")
    state["dialogues"] = dialogues
    state["classes"] = class_names(dialogues)
    return ["corpus.jsonl"]


def _tokenizer(config, run_dir, state):
    vocab = train_vocab(state["dialogues"], int(config.tokenizer.get("size", DEFAULT_VOCAB_SIZE)))
    vocab.save(run_dir / "vocab.json")
    state["vocab"] = vocab
    return ["vocab.json"]


def _build(config, run_dir, state):
    cfg = build_config(config.build)
    seqs = build_dataset(state["dialogues"], cfg, state["vocab"])
    save_packed(seqs, run_dir / "packed.jsonl", packed_meta(cfg, state["vocab"], state["classes"], "vocab.json"))
    state["build"] = cfg
    state["splits"] = by_split(seqs)
    return ["packed.jsonl", "packed.meta.json"]


def packed_meta(cfg: BuildConfig, vocab: Vocab, classes, vocab_path: str) -> dict:
    return {
        "build": cfg.to_dict(),
        "classes": list(classes),
        "vocab_size": len(vocab),
        "pad_id": vocab.pad_id,
        "vocab_path": vocab_path,
    }


def _train(config, run_dir, state):
    mc = model_config_for(config.model, len(state["vocab"]), len(state["classes"]), state["build"].max_total_tokens)
    tc = TrainConfig.from_dict(config.train)
    summary = run_seeds(mc, state["splits"], tc, config.seeds, run_dir / "train")
    state["summary"] = summary
    state["model_config"] = mc
    return [f"train/seed{s}/best.ckpt" for s in config.seeds]


def _eval(config, run_dir, state):
    model, _ = read_checkpoint(run_dir / "train" / f"seed{config.seeds[0]}" / "best.ckpt")
    report = evaluate(model, state["splits"]["test"], state["classes"])
    (run_dir / "eval").mkdir(exist_ok=True)
    (run_dir / "eval" / "report.json").write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    state["model"] = model
    state["report"] = report
    _write_metrics(run_dir, state)
    return ["eval/report.json", "metrics.json"]


def _inspect(config, run_dir, state):
    opts = {"n_correct": 10, "n_incorrect": 10, "seed": 0, "top_k": 10, **config.inspect}
    out = run_dir / "reports"
    written = inspect_samples(
        state["model"], state["splits"]["test"], state["report"].predictions, state["vocab"], state["classes"],
        opts["n_correct"], opts["n_incorrect"], opts["seed"], out, opts["top_k"], strict=False,
    )  # fmt: skip
    state["attention"] = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    _write_metrics(run_dir, state)
    return [f"reports/{p.name}" for p in written]


def _ablate(config, run_dir, state):
    spec = AblationSpec.from_dict(config.ablation)
    tc = TrainConfig.from_dict(config.train)
    table = run_ablation(spec, state["dialogues"], state["vocab"], state["model_config"], tc, state["build"],
                         run_dir / "ablation")  # fmt: skip
    (run_dir / "ablation" / "table.md").write_text(table.to_markdown(), encoding="utf-8")
    state["ablation"] = table.to_dict()
    _write_metrics(run_dir, state)
    return ["ablation/table.md", "ablation/ablation.json"]


def _write_metrics(run_dir: Path, state: dict) -> None:
    summary = state["summary"]
    metrics = {
        "seeds": [r.seed for r in summary.runs],
        "test_f1": summary.test_f1,
        "mean_test_f1": summary.mean_test_f1,
        "runs": [r.to_dict() for r in summary.runs],
        "eval_weighted_f1": state["report"].weighted_f1,
    }
    if "attention" in state:
        metrics["speaker_attention"] = state["attention"]["speaker_attention"]
    if "ablation" in state:
        metrics["ablation"] = state["ablation"]
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2), encoding="utf-8")


_STAGE_FUNCS = {
    "ingest": _ingest,
    "tokenizer": _tokenizer,
    "build": _build,
    "train": _train,
    "eval": _eval,
    "inspect": _inspect,
    "ablate": _ablate,
}


def inspect_samples(
    model, seqs, predictions, vocab, classes, n_correct, n_incorrect, seed, out_dir, top_k=10, strict=True
) -> list[Path]:
    """Render HTML reports for a seeded sample of correct and incorrect predictions.

    Writes ``summary.json`` with the speaker-attention fractions. With
    ``strict=False`` the sample sizes shrink to what is available.
    """
    correct = [p == s.label.class_index for p, s in zip(predictions, seqs)]
    if not strict:
        n_correct = min(n_correct, sum(correct))
        n_incorrect = min(n_incorrect, len(correct) - sum(correct))
    chosen = sample_for_analysis(list(range(len(seqs))), correct, n_correct, n_incorrect, seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports, written = [], []
    for k, i in enumerate(chosen):
        probs, attn = forward(model, seqs[i].ids, collect_attention=True)
        rep = analyse(seqs[i], probs, attn, vocab, classes, top_k)
        reports.append(rep)
        path = out_dir / f"sample{k:02d}-{'correct' if rep.correct else 'incorrect'}.html"
        path.write_text(render_report(rep), encoding="utf-8")
        written.append(path)
    summary = {
        "n_correct": n_correct,
        "n_incorrect": n_incorrect,
        "speaker_attention": speaker_attention_stat(reports) if reports else None,
        "speaker_attention_by_layer": _by_layer(reports),
        "samples": [r.to_dict() for r in reports],
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    return written + [out_dir / "summary.json"]


def _by_layer(reports) -> list[float] | None:
    rows = [r.speaker_hit_by_layer for r in reports if r.speaker_hit_by_layer]
    if not rows:
        return None
    return [sum(col) / len(col) for col in zip(*rows)]
