"""Byte-level BPE tokenizer with RoBERTa-style special tokens.

Ids 0-3 are the specials, 4-259 the raw bytes, and every id after that is a
distinct merged string, in merge order. Encoding never emits a special id:
any text is covered by the byte tokens.
"""

from __future__ import annotations

import codecs
import heapq
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

from erc.errors import ConfigError, DataError

CLS, PAD, EOS, UNK = "<s>", "<pad>", "</s>", "<unk>"
SPECIALS = (CLS, PAD, EOS, UNK)
N_BYTES = 256
FIRST_MERGE_ID = len(SPECIALS) + N_BYTES
DEFAULT_VOCAB_SIZE = 4096

# The final ``.`` guarantees every character lands in some pretoken.
_PRETOKEN = re.compile(r"""'(?:[sdmt]|ll|ve|re)| ?[^\W\d_]+| ?\d+| ?(?:[^\s\w]|_)+|\s+(?!\S)|\s+|.""", re.S)
_WS = re.compile(r"\s+")


def normalize(text: str) -> str:
    """Collapse runs of whitespace to one space. Case is preserved."""
    return _WS.sub(" ", text)


def pretokenize(text: str) -> list[bytes]:
    return [m.group().encode("utf-8") for m in _PRETOKEN.finditer(normalize(text))]


@dataclass(frozen=True, eq=False)
class Vocab:
    merges: tuple[tuple[bytes, bytes], ...]
    tokens: tuple[bytes, ...] = field(init=False, repr=False)
    _ids: dict = field(init=False, repr=False)
    _ranks: dict = field(init=False, repr=False)

    cls_id = 0
    pad_id = 1
    eos_id = 2
    unk_id = 3

    def __post_init__(self):
        tokens = [s.encode() for s in SPECIALS] + [bytes([b]) for b in range(N_BYTES)]
        ids = {tok: i for i, tok in enumerate(tokens[len(SPECIALS):], len(SPECIALS))}
        for a, b in self.merges:
            # Different merge paths can yield the same string; it keeps its first id.
            if a + b not in ids:
                ids[a + b] = len(tokens)
                tokens.append(a + b)
        object.__setattr__(self, "tokens", tuple(tokens))
        object.__setattr__(self, "_ids", ids)
        object.__setattr__(self, "_ranks", {pair: r for r, pair in enumerate(self.merges)})
        object.__setattr__(self, "_encode_word", lru_cache(maxsize=65536)(self._bpe))

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.merges == other.merges

    def __hash__(self):
        return hash(self.merges)

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(range(len(SPECIALS)))

    def _bpe(self, word: bytes) -> tuple[int, ...]:
        parts = [bytes([b]) for b in word]
        while len(parts) > 1:
            ranked = [(self._ranks.get((a, b)), i) for i, (a, b) in enumerate(zip(parts, parts[1:]))]
            ranked = [(r, i) for r, i in ranked if r is not None]
            if not ranked:
                break
            best = min(ranked)[0]
            a, b = self.merges[best]
            out, i = [], 0
            while i < len(parts):
                if i + 1 < len(parts) and parts[i] == a and parts[i + 1] == b:
                    out.append(a + b)
                    i += 2
                else:
                    out.append(parts[i])
                    i += 1
            parts = out
        return tuple(self._ids[p] for p in parts)

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for word in pretokenize(text):
            ids.extend(self._encode_word(word))
        return ids

    def token_bytes(self, i: int) -> bytes:
        if not 0 <= i < len(self.tokens):
            raise DataError(f"token id {i} out of range for a vocabulary of {len(self.tokens)}")
        return self.tokens[i]

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.token_texts(ids))

    def token_texts(self, ids: Iterable[int]) -> list[str]:
        """Per-token strings whose concatenation equals ``decode(ids)``.

        Multi-byte characters split across tokens are attributed to the token
        that completes them.
        """
        decoder = codecs.getincrementaldecoder("utf-8")(errors="replace")
        out = []
        for i in ids:
            b = self.token_bytes(i)
            if i < len(SPECIALS):
                out.append(decoder.decode(b"", final=True) + SPECIALS[i])
                decoder.reset()
            else:
                out.append(decoder.decode(b))
        if out:
            out[-1] += decoder.decode(b"", final=True)
        return out

    def to_dict(self) -> dict:
        return {
            "type": "byte-bpe",
            "specials": {name: i for i, name in enumerate(SPECIALS)},
            "merges": [[a.decode("latin-1"), b.decode("latin-1")] for a, b in self.merges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Vocab:
        if d.get("type") != "byte-bpe":
            raise DataError("not a byte-bpe vocabulary file")
        return cls(tuple((a.encode("latin-1"), b.encode("latin-1")) for a, b in d["merges"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=0), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocab:
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise DataError(f"{path}: vocabulary file not found") from None
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise DataError(f"{path}: malformed vocabulary ({exc})") from None


def train_bpe(texts: Iterable[str], target_size: int = DEFAULT_VOCAB_SIZE) -> Vocab:
    """Learn merges until the vocabulary reaches ``target_size`` or no pair is left.

    Ties between equally frequent pairs go to the lexicographically smallest pair.
    """
    if target_size < FIRST_MERGE_ID:
        raise ConfigError(f"target_size {target_size} is below the {FIRST_MERGE_ID} byte and special tokens")
    counts = Counter()
    for text in texts:
        counts.update(pretokenize(text))
    if not counts:
        raise DataError("cannot train a vocabulary on an empty corpus")

    words = [[bytes([b]) for b in w] for w in counts]
    freqs = list(counts.values())
    pair_counts: Counter = Counter()
    where: dict[tuple[bytes, bytes], set[int]] = {}
    for wi, (w, f) in enumerate(zip(words, freqs)):
        for pair in zip(w, w[1:]):
            pair_counts[pair] += f
            where.setdefault(pair, set()).add(wi)
    heap = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)

    merges: list[tuple[bytes, bytes]] = []
    produced: set[bytes] = set()
    while len(produced) < target_size - FIRST_MERGE_ID and heap:
        neg, pair = heapq.heappop(heap)
        if pair_counts.get(pair, 0) != -neg or neg == 0:
            continue
        merges.append(pair)
        a, b = pair
        produced.add(a + b)
        touched: Counter = Counter()
        for wi in sorted(where.pop(pair, ())):
            w, f = words[wi], freqs[wi]
            for p in zip(w, w[1:]):
                touched[p] -= f
            out, i = [], 0
            while i < len(w):
                if i + 1 < len(w) and w[i] == a and w[i + 1] == b:
                    out.append(a + b)
                    i += 2
                else:
                    out.append(w[i])
                    i += 1
            words[wi] = out
            for p in zip(out, out[1:]):
                touched[p] += f
                where.setdefault(p, set()).add(wi)
        for p, delta in touched.items():
            if delta == 0:
                continue
            pair_counts[p] += delta
            if pair_counts[p] > 0:
                heapq.heappush(heap, (-pair_counts[p], p))
            else:
                del pair_counts[p]
        pair_counts.pop(pair, None)
    return Vocab(tuple(merges))


def corpus_texts(dialogues: Sequence, capitalize_names: bool = True) -> list[str]:
    """Training text for the tokenizer: every utterance rendered with and without its speaker prefix."""
    texts = []
    for d in dialogues:
        for u in d.utterances:
            name = u.speaker.display_name
            texts.append(u.text)
            texts.append(f" {name.upper() if capitalize_names else name}: {u.text}")
    return texts


def train_vocab(dialogues: Sequence, target_size: int = DEFAULT_VOCAB_SIZE) -> Vocab:
    if not dialogues:
        raise DataError("cannot train a vocabulary on an empty corpus")
    return train_bpe(corpus_texts(dialogues), target_size)


def encode(text: str, vocab: Vocab) -> list[int]:
    return vocab.encode(text)


def decode(ids: Sequence[int], vocab: Vocab) -> str:
    return vocab.decode(ids)
