"""Tagged corpus I/O, character-level subtokenization, vocabularies and the synthetic corpus generator."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .tags import DEP, NER, POS, SchemaError, validate_bieos

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
CONTINUATION = "##"
NO_TARGET = -1


class CorpusParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class AnnotationError(ValueError):
    pass


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class Word:
    surface: str
    pos: str
    ner: str
    dep: str


@dataclass(frozen=True)
class AnnotatedSentence:
    words: tuple[Word, ...]

    def __len__(self) -> int:
        return len(self.words)

    @property
    def surfaces(self) -> list[str]:
        return [w.surface for w in self.words]


def _check_word(word: Word, line: int | None = None) -> None:
    for ts, label in ((POS, word.pos), (NER, word.ner), (DEP, word.dep)):
        if label not in ts:
            where = f"line {line}: " if line is not None else ""
            raise SchemaError(f"{where}unknown {ts.name} label {label!r}")


def read_corpus(source: bytes | BinaryIO) -> list[AnnotatedSentence]:
    """Parse the FORM/POS/NER/DEP TSV format into sentences.

    Sentences are separated by exactly one blank line and the stream must end
    with a newline. Every sentence's NER column must be well-formed BIEOS.
    """
    data = source if isinstance(source, (bytes, bytearray)) else source.read()
    text = bytes(data).decode("utf-8")
    if not text:
        return []
    if not text.endswith("\n"):
        raise CorpusParseError(text.count("\n") + 1, "missing final newline")
    lines = text[:-1].split("\n")
    sentences: list[AnnotatedSentence] = []
    block: list[Word] = []
    block_start = 1
    for lineno, line in enumerate(lines, start=1):
        if line == "":
            if not block:
                raise CorpusParseError(lineno, "empty sentence block")
            sentences.append(_finish_block(block, block_start))
            block = []
            continue
        cols = line.split("\t")
        if len(cols) != 4:
            raise CorpusParseError(lineno, f"expected 4 tab-separated columns, got {len(cols)}")
        if not cols[0]:
            raise CorpusParseError(lineno, "empty FORM")
        if not block:
            block_start = lineno
        word = Word(*cols)
        _check_word(word, lineno)
        block.append(word)
    if not block:
        raise CorpusParseError(len(lines), "trailing blank line")
    sentences.append(_finish_block(block, block_start))
    return sentences


def _finish_block(block: list[Word], start_line: int) -> AnnotatedSentence:
    verdict = validate_bieos([w.ner for w in block])
    if not verdict:
        raise AnnotationError(
            f"sentence at line {start_line}: BIEOS violation at word {verdict.position} ({verdict.reason})")
    return AnnotatedSentence(tuple(block))


def write_corpus(sentences: Iterable[AnnotatedSentence]) -> bytes:
    blocks = ["\n".join(f"{w.surface}\t{w.pos}\t{w.ner}\t{w.dep}" for w in s.words) for s in sentences]
    if not blocks:
        return b""
    return ("\n\n".join(blocks) + "\n").encode("utf-8")


def read_corpus_file(path: str | Path) -> list[AnnotatedSentence]:
    with open(path, "rb") as fh:
        return read_corpus(fh)


def write_corpus_file(sentences: Iterable[AnnotatedSentence], path: str | Path) -> None:
    Path(path).write_bytes(write_corpus(sentences))


def tokenize_word(word: Word | str) -> list[str]:
    surface = word.surface if isinstance(word, Word) else word
    if not surface:
        raise EncodingError("empty word surface")
    return [surface[0]] + [CONTINUATION + ch for ch in surface[1:]]


class Vocab:
    """Token <-> id map. Specials occupy ids 0..4, corpus tokens follow, extra mask tokens come last."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens " + " ".join(SPECIALS))
        self.tokens = tokens
        self.index = {}
        for i, tok in enumerate(tokens):
            if tok in self.index:
                raise ValueError(f"duplicate vocabulary token {tok!r}")
            self.index[tok] = i
        # ids in [len(SPECIALS), extra_start) are ordinary corpus tokens
        self.extra_start = len(tokens)

    pad_id = 0
    unk_id = 1
    cls_id = 2
    sep_id = 3
    mask_id = 4

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def add_tokens(self, new: Iterable[str]) -> list[int]:
        """Append tokens after all existing entries; they never become random-replacement candidates."""
        ids = []
        for tok in new:
            if tok in self.index:
                ids.append(self.index[tok])
                continue
            self.index[tok] = len(self.tokens)
            self.tokens.append(tok)
            ids.append(self.index[tok])
        return ids

    @property
    def regular_ids(self) -> range:
        return range(len(SPECIALS), self.extra_start)

    def copy(self) -> "Vocab":
        v = Vocab(self.tokens[: self.extra_start])
        v.add_tokens(self.tokens[self.extra_start:])
        return v

    def to_text(self) -> str:
        return "".join(t + "\n" for t in self.tokens)

    @classmethod
    def from_text(cls, text: str, extra_start: int | None = None) -> "Vocab":
        tokens = text.split("\n")
        if tokens and tokens[-1] == "":
            tokens.pop()
        v = cls(tokens)
        if extra_start is not None:
            v.extra_start = extra_start
        return v


def build_vocab(corpus: Sequence[AnnotatedSentence]) -> Vocab:
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for s in corpus for w in s.words for tok in tokenize_word(w))
    ordered = sorted(counts, key=lambda tok: (-counts[tok], tok))
    return Vocab(list(SPECIALS) + ordered)


@dataclass
class EncodedSentence:
    token_ids: np.ndarray
    word_spans: list[tuple[int, int]]
    pos_ids: np.ndarray
    ner_ids: np.ndarray
    dep_ids: np.ndarray
    segment_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.segment_ids is None:
            self.segment_ids = np.zeros_like(self.token_ids)

    def __len__(self) -> int:
        return len(self.token_ids)

    def tag_ids(self, task: str) -> np.ndarray:
        return {"pos": self.pos_ids, "ner": self.ner_ids, "dep": self.dep_ids}[task]

    @property
    def n_words(self) -> int:
        return len(self.word_spans)


def encode_sentence(s: AnnotatedSentence, v: Vocab, max_len: int) -> EncodedSentence:
    """Lay out ``[CLS] subtokens [SEP]``, dropping trailing whole words past ``max_len``."""
    if max_len < 3:
        raise EncodingError("max_len must be at least 3")
    ids = [v.cls_id]
    tags = {"pos": [NO_TARGET], "ner": [NO_TARGET], "dep": [NO_TARGET]}
    spans = []
    for wi, w in enumerate(s.words):
        pieces = tokenize_word(w)
        if len(ids) + len(pieces) + 1 > max_len:
            if wi == 0:
                raise EncodingError(
                    f"first word {w.surface!r} has {len(pieces)} subtokens, exceeding max_len-2={max_len - 2}")
            break
        start = len(ids)
        ids.extend(v.id_of(p) for p in pieces)
        spans.append((start, len(ids)))
        for task, ts, label in (("pos", POS, w.pos), ("ner", NER, w.ner), ("dep", DEP, w.dep)):
            tags[task].extend([ts.id_of(label)] * len(pieces))
    ids.append(v.sep_id)
    for t in tags.values():
        t.append(NO_TARGET)
    return EncodedSentence(
        token_ids=np.asarray(ids, dtype=np.int64),
        word_spans=spans,
        pos_ids=np.asarray(tags["pos"], dtype=np.int64),
        ner_ids=np.asarray(tags["ner"], dtype=np.int64),
        dep_ids=np.asarray(tags["dep"], dtype=np.int64),
    )


# --- synthetic corpus -------------------------------------------------------

# (subject kind, object kind) per verb frame; cycled when n_frames exceeds the list
_FRAME_KINDS = (
    ("np", "np"), ("per", "np"), ("pron", "loc"), ("org", "nump"),
    ("np", "per"), ("per", "org"), ("pron", "np"), ("org", "loc"),
)
_ENTITY = {"per": ("nh", "Nh"), "loc": ("ns", "Ns"), "org": ("ni", "Ni")}
_CJK_BASE = 0x4E00
_CJK_SPAN = 0x9FA5 - 0x4E00


@dataclass(frozen=True)
class SynthGrammarConfig:
    """Word inventories and template probabilities for the synthetic corpus.

    The lexicon is a pure function of ``lexicon_seed``, so corpora drawn with
    different sentence seeds share one vocabulary.
    """

    lexicon_seed: int = 20221103
    n_nouns: int = 40
    n_adjectives: int = 12
    n_adverbs: int = 8
    n_pronouns: int = 6
    n_person: int = 16
    n_location: int = 12
    n_org: int = 10
    n_numbers: int = 8
    n_quantifiers: int = 6
    n_frames: int = 6
    verbs_per_frame: int = 4
    word_len_weights: tuple[float, ...] = (0.5, 0.4, 0.1)
    p_adjective: float = 0.4
    p_adverb: float = 0.3
    p_second_clause: float = 0.5
    entity_len_weights: tuple[float, ...] = (0.4, 0.4, 0.2)

    def to_dict(self) -> dict:
        from dataclasses import asdict
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthGrammarConfig":
        d = dict(d)
        for key in ("word_len_weights", "entity_len_weights"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class Lexicon:
    words: dict[str, tuple[str, ...]]     # POS label -> surfaces
    frames: tuple[tuple[str, str], ...]   # (subject kind, object kind) per frame
    frame_verbs: tuple[tuple[str, ...], ...]


def build_lexicon(grammar: SynthGrammarConfig) -> Lexicon:
    rng = np.random.default_rng(grammar.lexicon_seed)
    sizes = {
        "n": grammar.n_nouns, "a": grammar.n_adjectives, "d": grammar.n_adverbs, "r": grammar.n_pronouns,
        "nh": grammar.n_person, "ns": grammar.n_location, "ni": grammar.n_org,
        "m": grammar.n_numbers, "q": grammar.n_quantifiers,
        "v": grammar.n_frames * grammar.verbs_per_frame,
    }
    lengths = {pos: rng.choice(len(grammar.word_len_weights), size=k, p=grammar.word_len_weights) + 1
               for pos, k in sizes.items()}
    n_chars = int(sum(l.sum() for l in lengths.values()))
    if n_chars > _CJK_SPAN:
        raise ValueError("lexicon too large for the character pool")
    # every character belongs to exactly one word, so POS is a function of each subtoken
    pool = iter(rng.choice(_CJK_SPAN, size=n_chars, replace=False) + _CJK_BASE)
    words = {pos: tuple("".join(chr(next(pool)) for _ in range(int(L))) for L in lens)
             for pos, lens in lengths.items()}
    words["wp"] = ("。", "！")
    frames = tuple(_FRAME_KINDS[i % len(_FRAME_KINDS)] for i in range(grammar.n_frames))
    verbs = words["v"]
    k = grammar.verbs_per_frame
    frame_verbs = tuple(verbs[i * k:(i + 1) * k] for i in range(grammar.n_frames))
    return Lexicon(words, frames, frame_verbs)


def _pick(rng: np.random.Generator, items: Sequence[str]) -> str:
    return items[int(rng.integers(len(items)))]


def _entity(rng, lex: Lexicon, kind: str, grammar: SynthGrammarConfig, head_dep: str) -> list[Word]:
    pos, etype = _ENTITY[kind]
    n = int(rng.choice(len(grammar.entity_len_weights), p=grammar.entity_len_weights)) + 1
    surfaces = [_pick(rng, lex.words[pos]) for _ in range(n)]
    if n == 1:
        ner = [f"S-{etype}"]
    else:
        ner = [f"B-{etype}"] + [f"I-{etype}"] * (n - 2) + [f"E-{etype}"]
    deps = ["ATT"] * (n - 1) + [head_dep]
    return [Word(s, pos, t, d) for s, t, d in zip(surfaces, ner, deps)]


def _phrase(rng, lex: Lexicon, kind: str, grammar: SynthGrammarConfig, head_dep: str) -> list[Word]:
    if kind in _ENTITY:
        return _entity(rng, lex, kind, grammar, head_dep)
    if kind == "pron":
        return [Word(_pick(rng, lex.words["r"]), "r", "O", head_dep)]
    out = []
    if kind == "nump":
        out.append(Word(_pick(rng, lex.words["m"]), "m", "O", "ATT"))
        out.append(Word(_pick(rng, lex.words["q"]), "q", "O", "ATT"))
    elif rng.random() < grammar.p_adjective:
        out.append(Word(_pick(rng, lex.words["a"]), "a", "O", "ATT"))
    out.append(Word(_pick(rng, lex.words["n"]), "n", "O", head_dep))
    return out


def _clause(rng, lex: Lexicon, grammar: SynthGrammarConfig, verb_dep: str) -> list[Word]:
    f = int(rng.integers(len(lex.frames)))
    subj_kind, obj_kind = lex.frames[f]
    words = _phrase(rng, lex, subj_kind, grammar, "SBV")
    # an adverb after a variable-length name would be indistinguishable from another name word
    if subj_kind not in _ENTITY and rng.random() < grammar.p_adverb:
        words.append(Word(_pick(rng, lex.words["d"]), "d", "O", "ADV"))
    words.append(Word(_pick(rng, lex.frame_verbs[f]), "v", "O", verb_dep))
    words.extend(_phrase(rng, lex, obj_kind, grammar, "VOB"))
    return words


def synth_corpus(seed: int, n_sentences: int, grammar: SynthGrammarConfig | None = None) -> list[AnnotatedSentence]:
    """Generate ``n_sentences`` template sentences with ground-truth tags.

    Each sentence is ``clause [， clause] 。|！``; the first clause's verb is the
    single HED and a second clause's verb attaches as COO. Verbs are
    partitioned by frame, and the frame fixes the subject and object kinds.
    Adverbs only follow non-entity subjects.
    """
    grammar = grammar or SynthGrammarConfig()
    lex = build_lexicon(grammar)
    rng = np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), 0x5EED]))
    out = []
    for _ in range(n_sentences):
        words = _clause(rng, lex, grammar, "HED")
        if rng.random() < grammar.p_second_clause:
            words.append(Word("，", "wp", "O", "WP"))
            words.extend(_clause(rng, lex, grammar, "COO"))
        words.append(Word(_pick(rng, lex.words["wp"]), "wp", "O", "WP"))
        out.append(AnnotatedSentence(tuple(words)))
    return out

