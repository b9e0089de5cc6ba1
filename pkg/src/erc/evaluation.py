"""Evaluation reports and the context/speaker ablation grid."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from erc.corpus import Dialogue, class_names
from erc.errors import ConfigError, DataError
from erc.metrics import confusion_matrix, per_class_scores
from erc.model import EncoderClassifier, ModelConfig, predict
from erc.seqbuilder import BuildConfig, ContextMode, PackedSequence, build_dataset, by_split
from erc.tokenizer import Vocab
from erc.training import TrainConfig, run_seeds


@dataclass
class EvalReport:
    class_names: tuple[str, ...]
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    weighted_f1: float
    predictions: list[int] = field(default_factory=list)
    gold: list[int] = field(default_factory=list)

    @classmethod
    def from_predictions(cls, pred: Sequence[int], gold: Sequence[int], names: Sequence[str]) -> EvalReport:
        cm = confusion_matrix(gold, pred, len(names))
        p, r, f, s = per_class_scores(cm)
        return cls(tuple(names), cm, p, r, f, s, float((f * s).sum() / s.sum()), list(map(int, pred)), list(map(int, gold)))

    def to_dict(self) -> dict:
        return {
            "weighted_f1": self.weighted_f1,
            "weighted_f1_pct": pct(self.weighted_f1),
            "n_examples": int(self.confusion.sum()),
            "classes": [
                {
                    "name": name,
                    "precision": float(self.precision[i]),
                    "recall": float(self.recall[i]),
                    "f1": float(self.f1[i]),
                    "support": int(self.support[i]),
                }
                for i, name in enumerate(self.class_names)
            ],
            "confusion": self.confusion.tolist(),
            "predictions": self.predictions,
            "gold": self.gold,
        }


def pct(x: float) -> str:
    return f"{100 * x:.2f}"


def evaluate(
    model: EncoderClassifier,
    seqs: Sequence[PackedSequence],
    names: Sequence[str] | None = None,
    batch_size: int = 64,
) -> EvalReport:
    n = model.config.n_classes
    if not seqs:
        raise DataError("cannot evaluate on an empty split")
    names = tuple(names) if names is not None else tuple(f"class{i}" for i in range(n))
    if len(names) != n:
        raise DataError(f"checkpoint predicts {n} classes but the data declares {len(names)}")
    gold = [s.label.class_index for s in seqs]
    if max(gold) >= n:
        raise DataError(f"gold label {max(gold)} outside the checkpoint's {n} classes")
    probs = predict(model, [s.ids for s in seqs], batch_size)
    return EvalReport.from_predictions(probs.argmax(1), gold, names)


# -- ablation ------------------------------------------------------------------


@dataclass(frozen=True)
class AblationCell:
    mode: ContextMode
    prepend_speaker: bool = True

    @property
    def label(self) -> str:
        text = {
            ContextMode.NONE: "no context",
            ContextMode.PAST: "past context",
            ContextMode.FUTURE: "future context",
            ContextMode.BOTH: "past + future context",
        }[self.mode]
        return text if self.prepend_speaker else f"{text}, no speaker names"


DEFAULT_CELLS = (
    AblationCell(ContextMode.NONE),
    AblationCell(ContextMode.PAST),
    AblationCell(ContextMode.FUTURE),
    AblationCell(ContextMode.BOTH),
    AblationCell(ContextMode.BOTH, prepend_speaker=False),
)


@dataclass
class AblationSpec:
    cells: tuple[AblationCell, ...] = DEFAULT_CELLS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        self.cells = tuple(self.cells)
        self.seeds = tuple(self.seeds)
        if len(set(self.cells)) != len(self.cells):
            raise ConfigError("ablation cells must be unique")
        if not self.cells or not self.seeds:
            raise ConfigError("an ablation needs at least one cell and one seed")

    @classmethod
    def from_dict(cls, d: dict) -> AblationSpec:
        try:
            cells = [AblationCell(ContextMode.parse(c["mode"]), bool(c.get("prepend_speaker", True))) for c in d.get("cells", [])]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"ablation spec: malformed cell ({exc})") from None
        seeds = d.get("seeds", 5)
        seeds = tuple(range(seeds)) if isinstance(seeds, int) else tuple(seeds)
        return cls(tuple(cells) or DEFAULT_CELLS, seeds)

    def to_dict(self) -> dict:
        return {
            "cells": [{"mode": c.mode.value, "prepend_speaker": c.prepend_speaker} for c in self.cells],
            "seeds": list(self.seeds),
        }


@dataclass
class AblationRow:
    cell: AblationCell
    test_f1: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.test_f1))


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def row(self, mode, prepend_speaker: bool = True) -> AblationRow:
        cell = AblationCell(ContextMode.parse(mode), prepend_speaker)
        for r in self.rows:
            if r.cell == cell:
                return r
        raise KeyError(cell)

    def to_markdown(self) -> str:
        n = len(self.rows[0].test_f1) if self.rows else 0
        lines = [
            f"| configuration | weighted f1 (%), mean of {n} seeds |",
            "|---|---:|",
        ]
        best = max((r.mean for r in self.rows), default=None)
        for r in self.rows:
            value = pct(r.mean)
            lines.append(f"| {r.cell.label} | {f'**{value}**' if r.mean == best else value} |")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "rows": [
                {"mode": r.cell.mode.value, "prepend_speaker": r.cell.prepend_speaker, "test_f1": r.test_f1, "mean": r.mean}
                for r in self.rows
            ]
        }


def run_ablation(
    spec: AblationSpec,
    dialogues: Sequence[Dialogue],
    vocab: Vocab,
    model_config: ModelConfig,
    train_config: TrainConfig,
    build_config: BuildConfig | None = None,
    out_dir: str | Path | None = None,
) -> AblationTable:
    """Rebuild the packed data for every cell, train every seed, and tabulate mean test weighted f1."""
    base = build_config or BuildConfig()
    n = len(class_names(dialogues))
    if n > model_config.n_classes:
        raise DataError(f"corpus has {n} classes but the model config has {model_config.n_classes}")
    rows = []
    for k, cell in enumerate(spec.cells):
        cfg = BuildConfig(base.max_total_tokens, cell.mode, cell.prepend_speaker, base.capitalize_names)
        splits = by_split(build_dataset(dialogues, cfg, vocab))
        cell_dir = Path(out_dir) / f"cell{k}-{cell.mode.value}{'' if cell.prepend_speaker else '-nospk'}" if out_dir else None
        summary = run_seeds(model_config, splits, train_config, spec.seeds, cell_dir)
        rows.append(AblationRow(cell, summary.test_f1))
    table = AblationTable(rows)
    if out_dir is not None:
        Path(out_dir, "ablation.json").write_text(json.dumps(table.to_dict(), indent=2), encoding="utf-8")
    return table
