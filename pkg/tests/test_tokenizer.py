import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from erc.errors import ConfigError, DataError
from erc.tokenizer import FIRST_MERGE_ID, SPECIALS, Vocab, normalize, pretokenize, train_bpe, train_vocab


def naive_bpe(texts, target_size):
    """Recount every pair after every merge; ties go to the smallest pair."""
    words = Counter()
    for t in texts:
        for w in pretokenize(t):
            words[tuple(bytes([b]) for b in w)] += 1
    merges, produced = [], set()
    while FIRST_MERGE_ID + len(produced) < target_size:
        pairs = Counter()
        for w, n in words.items():
            for p in zip(w, w[1:]):
                pairs[p] += n
        if not pairs:
            break
        best = max(pairs.values())
        pair = min(p for p, c in pairs.items() if c == best)
        merges.append(pair)
        produced.add(pair[0] + pair[1])
        new = Counter()
        for w, n in words.items():
            out, i = [], 0
            while i < len(w):
                if i + 1 < len(w) and (w[i], w[i + 1]) == pair:
                    out.append(w[i] + w[i + 1])
                    i += 2
                else:
                    out.append(w[i])
                    i += 1
            new[tuple(out)] += n
        words = new
    return merges


def test_aaaa_example():
    v = train_bpe(["aaaa"], 300)
    assert v.merges == ((b"a", b"a"), (b"aa", b"aa"))
    assert v.encode("aaaa") == [FIRST_MERGE_ID + 1]
    assert v.decode([FIRST_MERGE_ID + 1]) == "aaaa"


def test_layout():
    v = train_bpe(["hello world"], 270)
    assert [v.cls_id, v.pad_id, v.eos_id, v.unk_id] == [0, 1, 2, 3]
    assert v.token_bytes(4 + ord("h")) == b"h"
    assert v.token_texts([0, 1, 2, 3]) == list(SPECIALS)


@pytest.mark.parametrize("seed", range(5))
def test_matches_naive_trainer(seed):
    rng = random.Random(seed)
    alphabet = "ab céd"
    texts = ["".join(rng.choice(alphabet) for _ in range(rng.randint(1, 30))) for _ in range(40)]
    assert list(train_bpe(texts, 300).merges) == naive_bpe(texts, 300)


def test_real_text_matches_naive(small_synth):
    from erc.tokenizer import corpus_texts

    texts = corpus_texts(small_synth)[:200]
    assert list(train_bpe(texts, 350).merges) == naive_bpe(texts, 350)


def test_deterministic_and_sized(small_synth):
    a = train_vocab(small_synth, 400)
    b = train_vocab(small_synth, 400)
    assert a == b and len(a) <= 400
    assert len(set(a.tokens)) == len(a.tokens)


TEXTS = st.text(st.characters(blacklist_categories=("Cs",)), max_size=80)


@settings(max_examples=300, deadline=None)
@given(TEXTS)
def test_round_trip_and_no_specials(text):
    v = _VOCAB
    ids = v.encode(text)
    assert v.decode(ids) == normalize(text)
    assert not set(ids) & v.special_ids


def test_round_trip_1000_lines(small_synth, small_vocab):
    rng = random.Random(0)
    pool = [u.text for d in small_synth for u in d.utterances]
    extras = ["Olá, café!", "漢字 and emoji \U0001f600", "tabs\tand\n\nnewlines", "  lead"]
    lines = [rng.choice(pool + extras) + " " + rng.choice(pool) for _ in range(1000)]
    for line in lines:
        assert small_vocab.decode(small_vocab.encode(line)) == normalize(line)


def test_token_texts_concatenate_to_decode(small_vocab):
    ids = [0] + small_vocab.encode("café \U0001f600 ROSS: hi") + [2, 2]
    texts = small_vocab.token_texts(ids)
    assert len(texts) == len(ids)
    assert "".join(texts) == small_vocab.decode(ids)
    assert texts[-1] == "</s>"


def test_save_load(tmp_path, small_vocab):
    p = tmp_path / "v.json"
    small_vocab.save(p)
    assert Vocab.load(p) == small_vocab
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(DataError):
        Vocab.load(tmp_path / "bad.json")
    with pytest.raises(DataError):
        Vocab.load(tmp_path / "missing.json")


def test_errors(small_vocab):
    with pytest.raises(ConfigError):
        train_bpe(["abc"], 100)
    with pytest.raises(DataError):
        train_bpe([], 300)
    with pytest.raises(DataError):
        small_vocab.token_bytes(len(small_vocab))


def test_case_preserved():
    v = train_bpe(["Ross ROSS ross"], 280)
    assert v.decode(v.encode("ROSS")) == "ROSS"
    assert v.encode("ROSS") != v.encode("ross")


_VOCAB = train_bpe(["the quick brown fox jumps over the lazy dog", "ROSS: we were on a break!"] * 3, 320)
