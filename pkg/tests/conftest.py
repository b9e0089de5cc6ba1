import json

import pytest
import torch

from erc.corpus import Dialogue, EmotionLabel, Speaker, SyntheticConfig, Utterance, generate_synthetic
from erc.model import ModelConfig
from erc.tokenizer import train_vocab

torch.set_num_threads(1)


def make_dialogue(did, turns, split="train", classes=("neutral", "joy", "anger")):
    """``turns`` is a list of (speaker name, text, label name)."""
    utts = tuple(
        Utterance(did, i, Speaker(name.lower(), name), text, EmotionLabel(classes.index(lab), lab))
        for i, (name, text, lab) in enumerate(turns, 1)
    )
    return Dialogue(did, utts, split)


@pytest.fixture(scope="session")
def small_synth():
    cfg = SyntheticConfig(rule="content_only", dialogues={"train": 24, "val": 6, "test": 6}, max_turns=5)
    return generate_synthetic(cfg, seed=0)


@pytest.fixture(scope="session")
def small_vocab(small_synth):
    return train_vocab(small_synth, 400)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(vocab_size=400, n_classes=3, d_model=16, n_heads=2, n_layers=2, d_ff=32, max_positions=128, dropout=0.0)


@pytest.fixture
def native_file(tmp_path):
    rows = [
        {"dialogue_id": "d1", "index": 1, "speaker": "Joey", "text": "How you doin?", "label": "joy", "split": "train"},
        {"dialogue_id": "d1", "index": 2, "speaker": {"id": "r", "name": "Rachel", "gender": "F"},
         "text": "Fine.", "label": "neutral", "split": "train"},
        {"dialogue_id": "d2", "index": 1, "speaker": "Ross", "text": "We were on a break!", "label": "anger", "split": "test"},
    ]
    path = tmp_path / "corpus.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def small_packed(small_synth, small_vocab):
    from erc.seqbuilder import BuildConfig, build_dataset, by_split

    return by_split(build_dataset(small_synth, BuildConfig(max_total_tokens=64, mode="none"), small_vocab))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion; call with (number, passed, detail); passed=None marks a skip."""

    def record(number, passed, detail):
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        line = f"criterion {number:>2}: {status}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
