import io
from collections import defaultdict

import pytest
from hypothesis import given, settings, strategies as st

from lertlab.corpus import (CLS, NO_TARGET, SEP, SPECIALS, AnnotatedSentence, AnnotationError, CorpusParseError,
                            EncodingError, Vocab, Word, build_lexicon, build_vocab, encode_sentence, read_corpus,
                            SynthGrammarConfig, synth_corpus, tokenize_word, write_corpus)
from lertlab.tags import POS, SchemaError, validate_bieos


def S(*rows):
    return AnnotatedSentence(tuple(Word(*r) for r in rows))


def test_read_minimal_block():
    src = "他\tr\tO\tSBV\n跑\tv\tO\tHED\n".encode()
    corpus = read_corpus(io.BytesIO(src))
    assert len(corpus) == 1 and len(corpus[0]) == 2
    assert corpus[0].words[1] == Word("跑", "v", "O", "HED")


def test_read_empty_stream():
    assert read_corpus(io.BytesIO(b"")) == []


def test_three_columns_is_parse_error_with_line():
    src = "他\tr\tO\tSBV\n跑\tv\tO\n".encode()
    with pytest.raises(CorpusParseError) as exc:
        read_corpus(src)
    assert exc.value.line == 2
    assert "line 2" in str(exc.value)


def test_unknown_tag_is_schema_error():
    with pytest.raises(SchemaError):
        read_corpus("他\tzz\tO\tSBV\n".encode())


def test_bieos_violation_is_annotation_error():
    with pytest.raises(AnnotationError):
        read_corpus("张\tnh\tB-Nh\tATT\n跑\tv\tO\tHED\n".encode())


def test_missing_final_newline():
    with pytest.raises(CorpusParseError):
        read_corpus("他\tr\tO\tSBV".encode())


def test_multiple_sentences_and_round_trip():
    src = "他\tr\tO\tSBV\n跑\tv\tO\tHED\n\n北京\tns\tS-Ns\tSBV\n好\ta\tO\tHED\n".encode()
    corpus = read_corpus(src)
    assert [len(s) for s in corpus] == [2, 2]
    assert write_corpus(corpus) == src


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 20))
def test_round_trip_synthetic(seed, n):
    data = write_corpus(synth_corpus(seed, n))
    assert write_corpus(read_corpus(data)) == data


@pytest.mark.parametrize("surface,expected", [
    ("跑", ["跑"]),
    ("北京", ["北", "##京"]),
    ("abc", ["a", "##b", "##c"]),
])
def test_tokenize_word(surface, expected):
    assert tokenize_word(Word(surface, "n", "O", "ATT")) == expected


def test_build_vocab_frequency_and_ties():
    corpus = [S(("a", "n", "O", "ATT"), ("a", "n", "O", "ATT"), ("b", "n", "O", "ATT"), ("a", "n", "O", "ATT"))]
    v = build_vocab(corpus)
    assert v.tokens[:5] == list(SPECIALS)
    assert v.pad_id == 0 and v.index["[MASK]"] == 4
    assert v.index["a"] == 5 and v.index["b"] == 6
    tie = build_vocab([S(("y", "n", "O", "ATT"), ("x", "n", "O", "ATT"))])
    assert tie.index["x"] < tie.index["y"]


def test_build_vocab_empty():
    with pytest.raises(ValueError):
        build_vocab([])


def test_vocab_stable_and_file_round_trip():
    c = synth_corpus(5, 50)
    a, b = build_vocab(c), build_vocab(list(c))
    assert a.tokens == b.tokens
    assert Vocab.from_text(a.to_text()).tokens == a.tokens


def test_encode_single_char_words():
    s = S(("他", "r", "O", "SBV"), ("跑", "v", "O", "HED"))
    v = build_vocab([s])
    e = encode_sentence(s, v, 16)
    assert e.word_spans == [(1, 2), (2, 3)]
    assert e.token_ids[0] == v.index[CLS] and e.token_ids[-1] == v.index[SEP]
    assert e.pos_ids[0] == NO_TARGET and e.pos_ids[-1] == NO_TARGET


def test_encode_broadcasts_tags():
    s = S(("北京", "ns", "S-Ns", "SBV"), ("好", "a", "O", "HED"))
    e = encode_sentence(s, build_vocab([s]), 16)
    assert e.word_spans[0] == (1, 3)
    assert list(e.pos_ids[1:3]) == [POS.id_of("ns")] * 2


def test_encode_truncates_at_word_boundary():
    s = S(("ab", "n", "O", "SBV"), ("cde", "v", "O", "HED"), ("f", "wp", "O", "WP"))
    v = build_vocab([s])
    e = encode_sentence(s, v, 6)  # CLS + ab (2) + cde (3) would need 7
    assert e.word_spans == [(1, 3)]
    assert len(e) == 4
    with pytest.raises(EncodingError):
        encode_sentence(s, v, 3)


def test_encode_tag_counts_match_non_special_positions():
    for s in synth_corpus(3, 100):
        e = encode_sentence(s, build_vocab([s]), 128)
        n = len(e) - 2
        for task in ("pos", "ner", "dep"):
            assert int((e.tag_ids(task) != NO_TARGET).sum()) == n
        covered = [i for a, b in e.word_spans for i in range(a, b)]
        assert covered == list(range(1, len(e) - 1))


def test_synth_deterministic():
    a = write_corpus(synth_corpus(42, 200))
    b = write_corpus(synth_corpus(42, 200))
    assert a == b
    assert a != write_corpus(synth_corpus(43, 200))


def test_synth_sentences_well_formed():
    for s in synth_corpus(7, 2000):
        assert validate_bieos([w.ner for w in s.words]).valid
        assert sum(w.dep == "HED" for w in s.words) == 1
        assert s.words[-1].pos == "wp" and s.words[-1].dep == "WP"


def test_synth_pos_is_function_of_token():
    # brute-force count of (token, POS) pairs over 10k sentences: one POS per word and per subtoken
    corpus = synth_corpus(11, 10_000)
    by_word, by_sub = defaultdict(set), defaultdict(set)
    for s in corpus:
        for w in s.words:
            by_word[w.surface].add(w.pos)
            for t in tokenize_word(w):
                by_sub[t].add(w.pos)
    assert all(len(p) == 1 for p in by_word.values())
    assert all(len(p) == 1 for p in by_sub.values())


def test_lexicon_inventories_disjoint():
    lex = build_lexicon(SynthGrammarConfig())
    seen = {}
    for pos, words in lex.words.items():
        for w in words:
            assert seen.setdefault(w, pos) == pos
