"""Pack a target utterance and its speaker-prefixed context into one token sequence.

Layout: ``<s> past </s></s> current </s></s> future </s>``. Context grows one
step at a time, prepending ``x[t-i]`` and appending ``x[t+i]`` for
i = 1, 2, ... until the budget is exceeded; the step that overflowed is then
dropped as a whole.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from erc.corpus import Dialogue, EmotionLabel, Utterance
from erc.errors import ConfigError, DataError
from erc.tokenizer import Vocab

logger = logging.getLogger(__name__)

SEP_LEN = 2


class ContextMode(str, enum.Enum):
    NONE = "none"
    PAST = "past"
    FUTURE = "future"
    BOTH = "both"

    @classmethod
    def parse(cls, value) -> ContextMode:
        aliases = {"past_only": "past", "future_only": "future"}
        try:
            return cls(aliases.get(value, value))
        except ValueError:
            raise ConfigError(f"unknown context mode {value!r}; expected one of {[m.value for m in cls]}") from None


@dataclass(frozen=True)
class BuildConfig:
    max_total_tokens: int = 512
    mode: ContextMode = ContextMode.BOTH
    prepend_speaker: bool = True
    capitalize_names: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", ContextMode.parse(self.mode))
        if self.max_total_tokens < 2 + 2 * SEP_LEN:
            raise ConfigError(f"max_total_tokens must be at least {2 + 2 * SEP_LEN}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


@dataclass(frozen=True)
class TokenSpan:
    start: int
    end: int
    kind: str  # cls | eos | separator | speaker_name | utterance_text
    utterance: int | None = None

    def __len__(self) -> int:
        return self.end - self.start

    def positions(self) -> range:
        return range(self.start, self.end)


@dataclass(frozen=True)
class PackedSequence:
    ids: tuple[int, ...]
    spans: tuple[TokenSpan, ...]
    current_span: TokenSpan
    segment_boundaries: tuple[int, int]
    dialogue_id: str
    index: int
    label: EmotionLabel
    split: str = "train"
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def source(self) -> tuple[str, int]:
        return self.dialogue_id, self.index

    @property
    def included(self) -> tuple[int, ...]:
        """Dialogue indices of every utterance present, in sequence order."""
        seen: list[int] = []
        for s in self.spans:
            if s.utterance is not None and (not seen or seen[-1] != s.utterance):
                seen.append(s.utterance)
        return tuple(seen)

    def name_spans(self) -> list[TokenSpan]:
        return [s for s in self.spans if s.kind == "speaker_name"]

    def current_speaker_span(self) -> TokenSpan | None:
        for s in self.spans:
            if s.kind == "speaker_name" and s.utterance == self.index:
                return s
        return None

    def to_dict(self) -> dict:
        return {
            "ids": list(self.ids),
            "spans": [[s.start, s.end, s.kind, s.utterance] for s in self.spans],
            "current_span": [self.current_span.start, self.current_span.end],
            "segment_boundaries": list(self.segment_boundaries),
            "source": {"dialogue_id": self.dialogue_id, "index": self.index},
            "split": self.split,
            "label": self.label.class_index,
            "label_name": self.label.class_name,
            "truncated": self.truncated,
        }

    @classmethod
    def from_dict(cls, d: dict) -> PackedSequence:
        start, end = d["current_span"]
        return cls(
            ids=tuple(d["ids"]),
            spans=tuple(TokenSpan(*s) for s in d["spans"]),
            current_span=TokenSpan(start, end, "utterance_text", d["source"]["index"]),
            segment_boundaries=tuple(d["segment_boundaries"]),
            dialogue_id=d["source"]["dialogue_id"],
            index=d["source"]["index"],
            label=EmotionLabel(d["label"], d.get("label_name", str(d["label"]))),
            split=d.get("split", "train"),
            truncated=d.get("truncated", False),
        )


@dataclass
class _Piece:
    """Tokens of one rendered utterance and their spans relative to the piece."""

    utterance: int
    ids: list[int]
    spans: list[tuple[int, int, str]] = field(default_factory=list)


def render_utterance(u: Utterance, cfg: BuildConfig, vocab: Vocab) -> _Piece:
    """Tokenize ``" NAME: text"`` (or ``" text"`` without speakers).

    The name and the rest are encoded separately so the name span is exact;
    the leading space delimits consecutive utterances.
    """
    if cfg.prepend_speaker:
        name = u.speaker.display_name.upper() if cfg.capitalize_names else u.speaker.display_name
        name_ids = vocab.encode(" " + name)
        text_ids = vocab.encode(": " + u.text)
        spans = [(0, len(name_ids), "speaker_name"), (len(name_ids), len(name_ids) + len(text_ids), "utterance_text")]
        return _Piece(u.index, name_ids + text_ids, spans)
    ids = vocab.encode(" " + u.text)
    return _Piece(u.index, ids, [(0, len(ids), "utterance_text")])


def _in_mode(mode: ContextMode, past: bool) -> bool:
    return mode is ContextMode.BOTH or mode is (ContextMode.PAST if past else ContextMode.FUTURE)


def build(dialogue: Dialogue, t: int, cfg: BuildConfig, vocab: Vocab, _pieces: list[_Piece] | None = None) -> PackedSequence:
    """Build the packed input for utterance ``t`` (1-based) of ``dialogue``."""
    m = len(dialogue)
    if not 1 <= t <= m:
        raise DataError(f"utterance index {t} out of range 1..{m} for dialogue {dialogue.id!r}")
    cache: dict[int, _Piece] = {}

    def piece(k: int) -> _Piece:
        if _pieces is not None:
            return _pieces[k - 1]
        if k not in cache:
            cache[k] = render_utterance(dialogue.utterances[k - 1], cfg, vocab)
        return cache[k]

    budget = cfg.max_total_tokens - 2
    target = dialogue.utterances[t - 1]
    current = piece(t)

    room = budget - 2 * SEP_LEN
    truncated = len(current.ids) > room
    if truncated:
        logger.warning(
            "dialogue %s utterance %d: %d tokens exceed the %d-token budget; tail truncated",
            dialogue.id, t, len(current.ids), room,
        )  # fmt: skip
        spans = [(s, min(e, room), k) for s, e, k in current.spans if s < room]
        current = _Piece(current.utterance, current.ids[:room], spans)

    past: list[_Piece] = []
    future: list[_Piece] = []
    length = len(current.ids) + 2 * SEP_LEN
    i = 1
    while cfg.mode is not ContextMode.NONE and length <= budget:
        before = piece(t - i) if t - i >= 1 and _in_mode(cfg.mode, past=True) else None
        after = piece(t + i) if t + i <= m and _in_mode(cfg.mode, past=False) else None
        if before is None and after is None:
            break
        if before is not None:
            past.insert(0, before)
            length += len(before.ids)
        if after is not None:
            future.append(after)
            length += len(after.ids)
        if length > budget:
            # Drop everything this step added, never earlier steps.
            if before is not None:
                past.pop(0)
            if after is not None:
                future.pop()
            break
        i += 1

    ids = [vocab.cls_id]
    spans = [TokenSpan(0, 1, "cls")]

    def emit(piece: _Piece):
        offset = len(ids)
        ids.extend(piece.ids)
        for s, e, k in piece.spans:
            spans.append(TokenSpan(offset + s, offset + e, k, piece.utterance))

    def separator():
        spans.append(TokenSpan(len(ids), len(ids) + SEP_LEN, "separator"))
        ids.extend([vocab.eos_id] * SEP_LEN)

    for piece in past:
        emit(piece)
    first_sep = len(ids)
    separator()
    cur_start = len(ids)
    emit(current)
    cur_end = len(ids)
    second_sep = len(ids)
    separator()
    for piece in future:
        emit(piece)
    spans.append(TokenSpan(len(ids), len(ids) + 1, "eos"))
    ids.append(vocab.eos_id)

    return PackedSequence(
        ids=tuple(ids),
        spans=tuple(spans),
        current_span=TokenSpan(cur_start, cur_end, "utterance_text", t),
        segment_boundaries=(first_sep, second_sep),
        dialogue_id=dialogue.id,
        index=t,
        label=target.label,
        split=dialogue.split,
        truncated=truncated,
    )


def build_dataset(dialogues: Iterable[Dialogue], cfg: BuildConfig, vocab: Vocab) -> list[PackedSequence]:
    """One packed sequence per utterance, in dialogue order then utterance order."""
    out = []
    for d in dialogues:
        pieces = [render_utterance(u, cfg, vocab) for u in d.utterances]
        out.extend(build(d, t, cfg, vocab, pieces) for t in range(1, len(d) + 1))
    return out


def check_invariants(seq: PackedSequence, cfg: BuildConfig, vocab: Vocab) -> None:
    """Raise ``AssertionError`` if ``seq`` breaks a structural invariant of packed sequences."""
    ids = seq.ids
    eos = vocab.eos_id
    assert len(ids) <= cfg.max_total_tokens, "over budget"
    assert ids[0] == vocab.cls_id and ids[-1] == eos, "missing <s> or final </s>"
    a, b = seq.segment_boundaries
    assert ids[a : a + SEP_LEN] == (eos, eos) and ids[b : b + SEP_LEN] == (eos, eos), "separator is not </s></s>"
    assert a + SEP_LEN == seq.current_span.start and seq.current_span.end == b, "current utterance not between separators"
    specials = vocab.special_ids
    assert not any(x in specials for x in ids[1:a]), "special id in past segment"
    assert not any(x in specials for x in ids[a + SEP_LEN : b]), "special id in current segment"
    assert not any(x in specials for x in ids[b + SEP_LEN : -1]), "special id in future segment"
    pos = 0
    for s in seq.spans:
        assert s.start == pos and s.end >= s.start, "spans do not tile the sequence"
        pos = s.end
    assert pos == len(ids), "spans do not cover the sequence"
    included = seq.included
    past = [u for u in included if u < seq.index]
    future = [u for u in included if u > seq.index]
    assert included == tuple(past) + (seq.index,) + tuple(future), "utterances out of chronological order"
    assert all(s.end <= a for s in seq.spans if s.utterance is not None and s.utterance < seq.index)
    assert all(s.start >= b + SEP_LEN for s in seq.spans if s.utterance is not None and s.utterance > seq.index)
    if cfg.mode is ContextMode.NONE:
        assert not past and not future, "context present in mode none"
    if cfg.mode is ContextMode.PAST:
        assert not future, "future context in past mode"
    if cfg.mode is ContextMode.FUTURE:
        assert not past, "past context in future mode"
    if not cfg.prepend_speaker:
        assert not seq.name_spans(), "speaker span without speaker prepending"


def save_packed(seqs: Sequence[PackedSequence], path: str | Path, meta: dict) -> None:
    """Write packed sequences as JSON lines plus a ``<stem>.meta.json`` sidecar."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for s in seqs:
            fh.write(json.dumps(s.to_dict()) + "\n")
    meta_path(path).write_text(json.dumps(meta, indent=2), encoding="utf-8")


def meta_path(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


def resolve_packed(path: str | Path) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / "packed.jsonl"
    if not path.exists():
        raise DataError(f"{path}: packed file not found")
    return path


def load_packed(path: str | Path) -> tuple[list[PackedSequence], dict]:
    """Read a packed file (or a directory holding ``packed.jsonl``) and its metadata."""
    path = resolve_packed(path)
    seqs = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                seqs.append(PackedSequence.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed packed row ({exc})") from None
    mp = meta_path(path)
    meta = json.loads(mp.read_text(encoding="utf-8")) if mp.exists() else {}
    return seqs, meta


def by_split(seqs: Iterable[PackedSequence]) -> dict[str, list[PackedSequence]]:
    out: dict[str, list[PackedSequence]] = {"train": [], "val": [], "test": []}
    for s in seqs:
        out.setdefault(s.split, []).append(s)
    return out
