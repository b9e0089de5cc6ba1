"""Dialogue data model, corpus loaders and corpus statistics."""

from __future__ import annotations

import csv
import json
import logging
import random
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from erc.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

MELD_CLASSES = ("neutral", "joy", "surprise", "anger", "sadness", "disgust", "fear")
IEMOCAP_CLASSES = ("neutral", "frustration", "sadness", "anger", "excited", "happiness")

# Original IEMOCAP annotations that exist but are not part of the six evaluated classes.
IEMOCAP_DROPPED = frozenset({"surprise", "fear", "disgust", "other", "xxx", "sur", "fea", "dis", "oth"})
IEMOCAP_ALIASES = {
    "neu": "neutral",
    "fru": "frustration",
    "frustrated": "frustration",
    "sad": "sadness",
    "ang": "anger",
    "angry": "anger",
    "exc": "excited",
    "hap": "happiness",
    "happy": "happiness",
}

FEMALE_NAMES = ("Mary", "Patricia", "Jennifer", "Linda", "Elizabeth")
MALE_NAMES = ("James", "John", "Robert", "Michael", "William")


@dataclass(frozen=True)
class Speaker:
    id: str
    display_name: str
    gender: str | None = None

    def __post_init__(self):
        if not self.display_name:
            raise DataError(f"speaker {self.id!r} has an empty display name")


@dataclass(frozen=True)
class EmotionLabel:
    class_index: int
    class_name: str


@dataclass(frozen=True)
class Utterance:
    dialogue_id: str
    index: int
    speaker: Speaker
    text: str
    label: EmotionLabel


@dataclass(frozen=True)
class Dialogue:
    id: str
    utterances: tuple[Utterance, ...]
    split: str

    def __post_init__(self):
        if not self.utterances:
            raise DataError(f"dialogue {self.id!r} has no utterances")
        if self.split not in SPLITS:
            raise DataError(f"dialogue {self.id!r}: unknown split {self.split!r}")

    def __len__(self) -> int:
        return len(self.utterances)


@dataclass(frozen=True)
class SplitStats:
    dialogues: int
    utterances: int
    mean: float | None
    std: float | None

    @property
    def defined(self) -> bool:
        return self.dialogues > 0


@dataclass(frozen=True)
class CorpusStats:
    splits: dict[str, SplitStats]

    def to_dict(self) -> dict:
        return {
            name: {"dialogues": s.dialogues, "utterances": s.utterances, "mean": s.mean, "std": s.std}
            for name, s in self.splits.items()
        }


def class_names(dialogues: Iterable[Dialogue]) -> tuple[str, ...]:
    """Class names ordered by class index, as carried by the labels."""
    seen: dict[int, str] = {}
    for d in dialogues:
        for u in d.utterances:
            seen.setdefault(u.label.class_index, u.label.class_name)
    if not seen:
        return ()
    n = max(seen) + 1
    return tuple(seen.get(i, f"class{i}") for i in range(n))


def _natural_key(s: str):
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", s)]


def infer_classes(label_names: Iterable[str]) -> tuple[str, ...]:
    names = set(label_names)
    if names <= set(MELD_CLASSES):
        return MELD_CLASSES
    if names <= set(IEMOCAP_CLASSES):
        return IEMOCAP_CLASSES
    return tuple(sorted(names, key=_natural_key))


def _label(name: str, classes: Sequence[str], where: str) -> EmotionLabel:
    try:
        return EmotionLabel(classes.index(name), name)
    except ValueError:
        raise DataError(f"{where}: unknown emotion {name!r}; valid classes are {list(classes)}") from None


# -- loading -----------------------------------------------------------------


def load_corpus(path: str | Path, format: str = "native_jsonl", classes: Sequence[str] | None = None) -> list[Dialogue]:
    """Load a corpus and return its dialogues ordered by split, then by first appearance.

    ``format`` is one of ``native_jsonl``, ``meld_csv`` or ``iemocap_json``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file or directory")
    loaders = {"native_jsonl": _load_native, "meld_csv": _load_meld, "iemocap_json": _load_iemocap}
    if format not in loaders:
        raise ConfigError(f"unknown corpus format {format!r}; expected one of {sorted(loaders)}")
    dialogues = loaders[format](path, classes)
    if not dialogues:
        raise DataError(f"{path}: no dialogues found")
    order = {s: i for i, s in enumerate(SPLITS)}
    return sorted(dialogues, key=lambda d: order[d.split])


def _speaker_from_json(value, where: str) -> Speaker:
    if isinstance(value, str):
        return Speaker(value, value)
    if isinstance(value, dict) and "id" in value:
        return Speaker(str(value["id"]), str(value.get("name") or value["id"]), value.get("gender"))
    raise DataError(f"{where}: speaker must be a string or an object with an 'id'")


def _speaker_to_json(s: Speaker):
    if s.id == s.display_name and s.gender is None:
        return s.id
    out = {"id": s.id, "name": s.display_name}
    if s.gender is not None:
        out["gender"] = s.gender
    return out


def _load_native(path: Path, classes):
    rows = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
                row = (
                    str(rec["dialogue_id"]),
                    int(rec["index"]),
                    _speaker_from_json(rec["speaker"], where),
                    str(rec["text"]),
                    str(rec["label"]),
                    str(rec["split"]),
                    where,
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{where}: malformed row ({exc})") from None
            rows.append(row)
    if classes is None:
        classes = infer_classes(r[4] for r in rows)
    grouped: dict[str, list] = {}
    for row in rows:
        grouped.setdefault(row[0], []).append(row)
    dialogues = []
    for did, items in grouped.items():
        items.sort(key=lambda r: r[1])
        splits = {r[5] for r in items}
        if len(splits) != 1:
            raise DataError(f"{items[0][6]}: dialogue {did!r} spans several splits {sorted(splits)}")
        indices = [r[1] for r in items]
        if indices != list(range(1, len(items) + 1)):
            raise DataError(f"{items[0][6]}: dialogue {did!r} indices are not a contiguous 1..M run: {indices}")
        utts = tuple(Utterance(did, r[1], r[2], r[3], _label(r[4], classes, r[6])) for r in items)
        dialogues.append(_dialogue(did, utts, items[0][5]))
    return dialogues


def _dialogue(did: str, utts: tuple[Utterance, ...], split: str) -> Dialogue:
    try:
        return Dialogue(did, utts, split)
    except DataError as exc:
        raise DataError(f"dialogue {did!r}: {exc}") from None


def _split_from_name(name: str) -> str:
    name = name.lower()
    if "dev" in name or "val" in name:
        return "val"
    if "test" in name:
        return "test"
    return "train"


def _read_text(path: Path) -> str:
    raw = path.read_bytes()
    try:
        return raw.decode("utf-8-sig")
    except UnicodeDecodeError:
        return raw.decode("cp1252", errors="replace")


def _load_meld(path: Path, classes):
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    classes = tuple(classes or MELD_CLASSES)
    dialogues = []
    for file in files:
        split = _split_from_name(file.name)
        reader = csv.DictReader(_read_text(file).splitlines())
        required = {"Utterance", "Speaker", "Emotion", "Dialogue_ID", "Utterance_ID"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise DataError(f"{file}:1: missing MELD columns {sorted(required - set(reader.fieldnames or []))}")
        grouped: dict[str, list] = {}
        for rec in reader:
            where = f"{file}:{reader.line_num}"
            try:
                did = f"{split}-{int(rec['Dialogue_ID'])}"
                uid = int(rec["Utterance_ID"])
                speaker = rec["Speaker"].strip()
                text = rec["Utterance"]
                emotion = rec["Emotion"].strip().lower()
            except (TypeError, ValueError, AttributeError) as exc:
                raise DataError(f"{where}: malformed row ({exc})") from None
            if text is None or not speaker:
                raise DataError(f"{where}: malformed row (missing utterance or speaker)")
            grouped.setdefault(did, []).append((uid, speaker, text, _label(emotion, classes, where), where))
        for did, items in grouped.items():
            items.sort(key=lambda r: r[0])
            if len({r[0] for r in items}) != len(items):
                raise DataError(f"{items[0][4]}: duplicate Utterance_ID in dialogue {did!r}")
            # MELD ids have gaps (dropped clips); indices are renumbered 1..M.
            utts = tuple(
                Utterance(did, t, Speaker(spk, spk), text, label)
                for t, (_, spk, text, label, _) in enumerate(items, 1)
            )
            dialogues.append(_dialogue(did, utts, split))
    return dialogues


def _load_iemocap(path: Path, classes):
    """IEMOCAP-style JSON.

    Either a list of dialogues or ``{"dialogues": [...]}``; each dialogue is
    ``{"id", "split", "utterances": [{"speaker", "text", "label", "gender"?}]}``.
    Utterances annotated with an IEMOCAP emotion outside the six evaluated
    classes are dropped.
    """
    classes = tuple(classes or IEMOCAP_CLASSES)
    try:
        data = json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: malformed JSON ({exc.msg})") from None
    if isinstance(data, dict):
        data = data.get("dialogues", [])
    dialogues = []
    for n, rec in enumerate(data):
        where = f"{path}: dialogue #{n}"
        try:
            did = str(rec["id"])
            split = str(rec.get("split", "train"))
            split = "val" if split in ("dev", "valid", "validation") else split
            raw = rec["utterances"]
        except (KeyError, TypeError, AttributeError) as exc:
            raise DataError(f"{where}: malformed dialogue ({exc})") from None
        kept = []
        for k, u in enumerate(raw):
            uwhere = f"{where} utterance #{k}"
            try:
                emotion = str(u["label"]).strip().lower()
                emotion = IEMOCAP_ALIASES.get(emotion, emotion)
                if emotion in IEMOCAP_DROPPED and emotion not in classes:
                    continue
                gender = u.get("gender")
                gender = str(gender).upper()[:1] if gender else None
                speaker = Speaker(str(u["speaker"]), str(u.get("name") or u["speaker"]), gender)
                kept.append((speaker, str(u["text"]), _label(emotion, classes, uwhere)))
            except (KeyError, TypeError, AttributeError) as exc:
                raise DataError(f"{uwhere}: malformed utterance ({exc})") from None
        if not kept:
            logger.warning("%s: dialogue %r has no evaluated utterances; skipped", path, did)
            continue
        utts = tuple(Utterance(did, t, s, text, lab) for t, (s, text, lab) in enumerate(kept, 1))
        dialogues.append(_dialogue(did, utts, split))
    return dialogues


def dump_jsonl(dialogues: Iterable[Dialogue], path: str | Path) -> None:
    """Write dialogues in the native JSON-lines format."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for d in dialogues:
            for u in d.utterances:
                rec = {
                    "dialogue_id": d.id,
                    "index": u.index,
                    "speaker": _speaker_to_json(u.speaker),
                    "text": u.text,
                    "label": u.label.class_name,
                    "split": d.split,
                }
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


# -- IEMOCAP speaker names ---------------------------------------------------


def assign_iemocap_names(dialogues: Sequence[Dialogue], seed: int) -> list[Dialogue]:
    """Give every actor a common American first name, deterministically per ``seed``.

    Actors tagged ``F``/``M`` draw from the matching five-name pool; actors
    without gender draw from whatever remains of the combined pool.
    """
    actors: dict[str, str | None] = {}
    for d in dialogues:
        for u in d.utterances:
            actors.setdefault(u.speaker.id, u.speaker.gender)

    rng = random.Random(seed)
    pools = {"F": list(FEMALE_NAMES), "M": list(MALE_NAMES)}
    for pool in pools.values():
        rng.shuffle(pool)
    by_gender = {"F": [], "M": [], None: []}
    for actor, gender in actors.items():
        by_gender[gender if gender in pools else None].append(actor)

    names: dict[str, str] = {}
    for gender in ("F", "M"):
        if len(by_gender[gender]) > len(pools[gender]):
            raise DataError(
                f"{len(by_gender[gender])} actors of gender {gender} but only {len(pools[gender])} names in the pool"
            )
        for actor, name in zip(by_gender[gender], pools[gender]):
            names[actor] = name
    rest = [n for n in FEMALE_NAMES + MALE_NAMES if n not in names.values()]
    rng.shuffle(rest)
    if len(by_gender[None]) > len(rest):
        raise DataError(f"{len(actors)} actors but only {len(FEMALE_NAMES) + len(MALE_NAMES)} names available")
    for actor, name in zip(by_gender[None], rest):
        names[actor] = name

    out = []
    for d in dialogues:
        utts = tuple(replace(u, speaker=replace(u.speaker, display_name=names[u.speaker.id])) for u in d.utterances)
        out.append(replace(d, utterances=utts))
    return out


# -- statistics --------------------------------------------------------------


def compute_stats(dialogues: Sequence[Dialogue]) -> CorpusStats:
    """Dialogue/utterance counts per split with mean and population std of dialogue length."""
    splits = {}
    for name in SPLITS:
        lengths = np.array([len(d) for d in dialogues if d.split == name], dtype=float)
        if lengths.size == 0:
            splits[name] = SplitStats(0, 0, None, None)
        else:
            splits[name] = SplitStats(int(lengths.size), int(lengths.sum()), float(lengths.mean()), float(lengths.std()))
    return CorpusStats(splits)


# -- synthetic corpora -------------------------------------------------------

RULES = ("content_only", "speaker_dependent", "context_dependent")

_SPEAKER_NAMES = (
    "Joey", "Ross", "Rachel", "Monica", "Chandler", "Phoebe",
    "Janice", "Gunther", "Emily", "Carol", "Susan", "Richard",
)  # fmt: skip

_ONSETS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class SyntheticConfig:
    rule: str = "content_only"
    n_classes: int = 3
    n_cues: int | None = None
    n_speakers: int = 4
    vocab_size: int = 100
    dialogues: dict[str, int] = field(default_factory=lambda: {"train": 160, "val": 20, "test": 20})
    min_turns: int = 3
    max_turns: int = 10
    min_words: int = 3
    max_words: int = 8
    speakers_per_dialogue: int = 2

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticConfig:
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"synthetic config: {exc}") from None


def _pseudo_words(rng: random.Random, n: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < n:
        k = rng.randint(2, 3)
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(k))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def synthetic_label(rule: str, n_classes: int, cue: int | None, speaker_slot: int, prev_cue: int | None) -> int:
    """The labeling rule of a synthetic corpus, shared by the generator and its checks.

    ``cue`` is the cue index in the utterance itself (``None`` when absent),
    ``speaker_slot`` the speaker's index in the corpus speaker list and
    ``prev_cue`` the cue carried by the previous utterance.
    """
    if rule == "content_only":
        return cue % n_classes
    if rule == "speaker_dependent":
        return (cue + speaker_slot) % n_classes
    if rule == "context_dependent":
        return (cue if cue is not None else prev_cue) % n_classes
    raise ConfigError(f"unknown labeling rule {rule!r}; expected one of {RULES}")


def synthetic_vocabulary(config: SyntheticConfig, seed: int) -> tuple[list[str], list[str], list[str]]:
    """(filler words, cue words, speaker names) used by ``generate_synthetic``."""
    rng = random.Random(f"vocab-{seed}")
    n_cues = config.n_cues or config.n_classes
    taken: set[str] = set()
    cues = _pseudo_words(rng, n_cues, taken)
    fillers = _pseudo_words(rng, config.vocab_size - n_cues, taken)
    names = [
        _SPEAKER_NAMES[i % len(_SPEAKER_NAMES)] + ("" if i < len(_SPEAKER_NAMES) else str(i // len(_SPEAKER_NAMES)))
        for i in range(config.n_speakers)
    ]
    return fillers, cues, names


def _check_synthetic(config: SyntheticConfig) -> None:
    n_cues = config.n_cues or config.n_classes
    if config.rule not in RULES:
        raise ConfigError(f"unknown labeling rule {config.rule!r}; expected one of {RULES}")
    if config.n_classes < 2:
        raise ConfigError("n_classes must be at least 2")
    if config.n_classes > n_cues:
        raise ConfigError(f"{config.n_classes} classes cannot be expressed with {n_cues} cue words")
    if config.vocab_size <= n_cues:
        raise ConfigError("vocab_size must exceed the number of cue words")
    if config.rule == "speaker_dependent" and config.n_speakers < 2:
        raise ConfigError("speaker_dependent labels need at least two speakers")
    if not 1 <= config.speakers_per_dialogue <= config.n_speakers:
        raise ConfigError("speakers_per_dialogue must be between 1 and n_speakers")
    if config.rule == "context_dependent" and config.min_turns < 2:
        raise ConfigError("context_dependent dialogues need at least two turns")
    if not 1 <= config.min_turns <= config.max_turns or not 1 <= config.min_words <= config.max_words:
        raise ConfigError("turn and word ranges must satisfy 1 <= min <= max")
    unknown = set(config.dialogues) - set(SPLITS)
    if unknown:
        raise ConfigError(f"unknown splits {sorted(unknown)}")


def generate_synthetic(config: SyntheticConfig, seed: int) -> list[Dialogue]:
    """Generate a labeled corpus whose labels follow ``config.rule`` exactly.

    * ``content_only``: each utterance holds one cue word; label = cue.
    * ``speaker_dependent``: label = (cue + speaker slot) mod C.
    * ``context_dependent``: each dialogue has one mood cue, planted only in
      odd turns; even turns carry no cue and take the label of the cue in
      the previous turn.
    """
    _check_synthetic(config)
    fillers, cues, names = synthetic_vocabulary(config, seed)
    classes = [f"c{i}" for i in range(config.n_classes)]
    speakers = [Speaker(f"spk{i}", name) for i, name in enumerate(names)]
    rng = random.Random(seed)
    dialogues = []
    for split in SPLITS:
        for n in range(config.dialogues.get(split, 0)):
            did = f"{split}-{n:04d}"
            cast = rng.sample(range(len(speakers)), config.speakers_per_dialogue)
            turns = rng.randint(config.min_turns, config.max_turns)
            mood = rng.randrange(len(cues))
            utts = []
            prev_cue = None
            for t in range(1, turns + 1):
                slot = rng.choice(cast)
                words = [rng.choice(fillers) for _ in range(rng.randint(config.min_words, config.max_words))]
                if config.rule == "context_dependent":
                    cue = mood if t % 2 == 1 else None
                else:
                    cue = rng.randrange(len(cues))
                if cue is not None:
                    words.insert(rng.randrange(len(words) + 1), cues[cue])
                y = synthetic_label(config.rule, config.n_classes, cue, slot, prev_cue)
                utts.append(Utterance(did, t, speakers[slot], " ".join(words), EmotionLabel(y, classes[y])))
                prev_cue = cue
            dialogues.append(Dialogue(did, tuple(utts), split))
    return dialogues
