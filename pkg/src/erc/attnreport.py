"""Head-averaged attention, top-k attended tokens, and static HTML highlight reports."""

from __future__ import annotations

import html
import random
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from erc.errors import ConfigError, DataError
from erc.seqbuilder import PackedSequence, TokenSpan
from erc.tokenizer import Vocab

GREEN = "#9be39b"
YELLOW = "#fff176"


@dataclass(frozen=True)
class AttentionQuery:
    layer: str | int = "last"  # "first", "last" or a layer index
    query: str = "cls_token"  # or "current_speaker_tokens"
    top_k: int = 10

    def __post_init__(self):
        if self.top_k < 1:
            raise ConfigError("top_k must be at least 1")
        if self.query not in ("cls_token", "current_speaker_tokens"):
            raise ConfigError(f"unknown attention query {self.query!r}")

    def layer_index(self, n_layers: int) -> int:
        if self.layer == "first":
            return 0
        if self.layer == "last":
            return n_layers - 1
        if not 0 <= int(self.layer) < n_layers:
            raise ConfigError(f"layer {self.layer} out of range for {n_layers} layers")
        return int(self.layer)


def head_mean(attn: np.ndarray, layer: int) -> np.ndarray:
    """Mean over heads of ``attn[layer]``; ``attn`` is ``[layers, heads, queries, keys]``."""
    return np.asarray(attn)[layer].mean(axis=0)


def query_positions(packed: PackedSequence, query: AttentionQuery) -> list[int]:
    if query.query == "cls_token":
        return [0]
    span = packed.current_speaker_span()
    if span is None or len(span) == 0:
        raise DataError("no current-speaker tokens: the sequence was built without speaker names")
    return list(span.positions())


def rank_keys(weights: np.ndarray, top_k: int) -> list[int]:
    """Key positions by descending weight; ties go to the lower position."""
    weights = np.asarray(weights)
    order = np.lexsort((np.arange(weights.size), -weights))
    return [int(i) for i in order[:top_k]]


def top_attended(rows: np.ndarray, packed: PackedSequence, query: AttentionQuery) -> list[int]:
    """Top-k keys attended by the query tokens of one head-averaged ``[L, L]`` map.

    Multi-token queries are averaged over their rows before ranking.
    """
    rows = np.asarray(rows)
    if rows.shape != (len(packed), len(packed)):
        raise DataError(f"attention map {rows.shape} does not match a sequence of {len(packed)} tokens")
    weights = rows[query_positions(packed, query)].mean(axis=0)
    return rank_keys(weights, query.top_k)


def expand_to_names(positions: Sequence[int], spans: Sequence[TokenSpan]) -> set[int]:
    """Grow a highlight set so any touched speaker-name span is highlighted in full."""
    out = set(positions)
    for s in spans:
        if s.kind == "speaker_name" and out.intersection(s.positions()):
            out.update(s.positions())
    return out


def highlight_units(positions: set[int], spans: Sequence[TokenSpan]) -> int:
    """Number of highlighted items when a whole name counts once."""
    units = set()
    for p in positions:
        for s in spans:
            if s.kind == "speaker_name" and s.start <= p < s.end:
                units.add(("name", s.start))
                break
        else:
            units.add(("tok", p))
    return len(units)


@dataclass
class HighlightReport:
    packed: PackedSequence
    tokens: list[str]
    green: set[int]
    yellow: set[int]
    predicted: int
    gold: int
    class_names: tuple[str, ...]
    speaker_hit: bool | None
    speaker_hit_by_layer: list[bool] = field(default_factory=list)

    @property
    def correct(self) -> bool:
        return self.predicted == self.gold

    def to_dict(self) -> dict:
        return {
            "dialogue_id": self.packed.dialogue_id,
            "index": self.packed.index,
            "predicted": self.class_names[self.predicted],
            "gold": self.class_names[self.gold],
            "correct": self.correct,
            "speaker_hit": self.speaker_hit,
            "speaker_hit_by_layer": self.speaker_hit_by_layer,
            "green": sorted(self.green),
            "yellow": sorted(self.yellow),
        }


def speaker_hit(attn: np.ndarray, packed: PackedSequence, layer: int, top_k: int = 10) -> bool | None:
    """Whether the ``<s>`` top-k at ``layer`` includes a token of the current speaker's name."""
    span = packed.current_speaker_span()
    if span is None:
        return None
    top = top_attended(head_mean(attn, layer), packed, AttentionQuery(layer, "cls_token", top_k))
    return any(p in span.positions() for p in top)


def analyse(
    packed: PackedSequence,
    probs: np.ndarray,
    attn: np.ndarray,
    vocab: Vocab,
    class_names: Sequence[str],
    top_k: int = 10,
) -> HighlightReport:
    """Green: first-layer top-k for the current speaker's name. Yellow: last-layer top-k for ``<s>``."""
    if len(vocab.token_texts(packed.ids)) != len(packed) or attn.shape[-1] != len(packed):
        raise DataError("attention and token ids disagree in length")
    n_layers = attn.shape[0]
    first = head_mean(attn, 0)
    last = head_mean(attn, n_layers - 1)
    has_speaker = packed.current_speaker_span() is not None
    green = top_attended(first, packed, AttentionQuery("first", "current_speaker_tokens", top_k)) if has_speaker else []
    yellow = top_attended(last, packed, AttentionQuery("last", "cls_token", top_k))
    return HighlightReport(
        packed=packed,
        tokens=vocab.token_texts(packed.ids),
        green=expand_to_names(green, packed.spans),
        yellow=expand_to_names(yellow, packed.spans),
        predicted=int(np.argmax(probs)),
        gold=packed.label.class_index,
        class_names=tuple(class_names),
        speaker_hit=speaker_hit(attn, packed, n_layers - 1, top_k),
        speaker_hit_by_layer=[bool(speaker_hit(attn, packed, k, top_k)) for k in range(n_layers)] if has_speaker else [],
    )


def speaker_attention_stat(reports: Sequence[HighlightReport]) -> dict[str, float | None]:
    """Fraction of reports whose last-layer ``<s>`` top-k hits the current speaker, overall and by correctness."""
    if not reports:
        raise DataError("no reports to summarise")

    def frac(items):
        items = [r.speaker_hit for r in items if r.speaker_hit is not None]
        return sum(items) / len(items) if items else None

    return {
        "all": frac(reports),
        "correct": frac([r for r in reports if r.correct]),
        "incorrect": frac([r for r in reports if not r.correct]),
    }


def render_report(report: HighlightReport) -> str:
    """Self-contained HTML: inline styles, no scripts."""
    packed = report.packed
    if len(report.tokens) != len(packed.ids):
        raise DataError("token texts and ids disagree in length")
    cur = packed.current_span
    parts = []
    for i, text in enumerate(report.tokens):
        g, y = i in report.green, i in report.yellow
        if g and y:
            bg = f"background:linear-gradient({GREEN} 50%,{YELLOW} 50%)"
        elif g:
            bg = f"background:{GREEN}"
        elif y:
            bg = f"background:{YELLOW}"
        else:
            bg = ""
        cls = " ".join(c for c, on in (("tok", True), ("green", g), ("yellow", y)) if on)
        piece = f'<span class="{cls}" style="{bg}">{html.escape(text)}</span>'
        if i == cur.start:
            piece = '<b class="current">' + piece
        if i == cur.end - 1:
            piece += "</b>"
        parts.append(piece)
    verdict = "correct" if report.correct else "incorrect"
    title = f"{packed.dialogue_id} #{packed.index}"
    return (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
        f"<title>{html.escape(title)}</title></head>\n"
        '<body style="font-family:sans-serif;max-width:60em;margin:2em auto">\n'
        f"<h3>{html.escape(title)}</h3>\n"
        f'<p class="labels">predicted: <b>{html.escape(report.class_names[report.predicted])}</b>, '
        f"gold: <b>{html.escape(report.class_names[report.gold])}</b> ({verdict})</p>\n"
        f'<p style="font-size:small"><span style="background:{GREEN}">green</span>: first layer, top tokens '
        f'attended by the current speaker; <span style="background:{YELLOW}">yellow</span>: last layer, top '
        "tokens attended by &lt;s&gt;. Names are highlighted in full.</p>\n"
        '<div class="sequence" style="font-family:monospace;white-space:pre-wrap;line-height:1.8">'
        + "".join(parts)
        + "</div>\n</body></html>\n"
    )


def sample_for_analysis(
    items: Sequence,
    correct: Sequence[bool],
    n_correct: int,
    n_incorrect: int,
    seed: int,
) -> list:
    """Seeded sample without replacement: ``n_correct`` correct then ``n_incorrect`` incorrect items."""
    if len(items) != len(correct):
        raise DataError("items and correctness flags differ in length")
    good = [x for x, c in zip(items, correct) if c]
    bad = [x for x, c in zip(items, correct) if not c]
    if n_correct > len(good) or n_incorrect > len(bad):
        raise DataError(
            f"asked for {n_correct} correct / {n_incorrect} incorrect samples "
            f"but only {len(good)} / {len(bad)} are available"
        )
    rng = random.Random(seed)
    return rng.sample(good, n_correct) + rng.sample(bad, n_incorrect)
