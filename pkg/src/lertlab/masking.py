"""Whole-word N-gram masking, 80/10/10 corruption and linguistic mask tokens (LMLM)."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .corpus import MASK, NO_TARGET, AnnotatedSentence, EncodedSentence, Vocab
from .tags import TAGSETS, TASKS, TagSet

LMLM_MODES = ("off", "pos", "ner", "dep", "all", "mix")
BUDGET_ROUNDING = ("stochastic", "ceil")

# corruption codes stored per position
NONE, MASKED, KEPT, RANDOM = 0, 1, 2, 3

# fallback events when a composite mask token is missing from the vocabulary
events: Counter = Counter()


class MaskingConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MaskingConfig:
    mask_ratio: float = 0.15
    ngram_weights: tuple[float, ...] = (0.4, 0.3, 0.2, 0.1)
    corruption_split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    lmlm_mode: str = "off"
    budget_rounding: str = "stochastic"

    def __post_init__(self):
        object.__setattr__(self, "ngram_weights", tuple(float(w) for w in self.ngram_weights))
        object.__setattr__(self, "corruption_split", tuple(float(w) for w in self.corruption_split))
        if not 0 < self.mask_ratio < 1:
            raise MaskingConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if abs(sum(self.ngram_weights) - 1) > 1e-9 or min(self.ngram_weights) < 0:
            raise MaskingConfigError("ngram_weights must be non-negative and sum to 1")
        if len(self.corruption_split) != 3 or abs(sum(self.corruption_split) - 1) > 1e-9 \
                or min(self.corruption_split) < 0:
            raise MaskingConfigError("corruption_split must be three non-negative fractions summing to 1")
        if self.lmlm_mode not in LMLM_MODES:
            raise MaskingConfigError(f"unknown lmlm_mode {self.lmlm_mode!r}")
        if self.budget_rounding not in BUDGET_ROUNDING:
            raise MaskingConfigError(f"unknown budget_rounding {self.budget_rounding!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaskedExample:
    input_ids: np.ndarray
    segment_ids: np.ndarray
    is_masked: np.ndarray
    mlm_targets: np.ndarray
    pos_targets: np.ndarray
    ner_targets: np.ndarray
    dep_targets: np.ndarray
    corruption: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.input_ids)

    @property
    def k(self) -> int:
        return int(self.is_masked.sum())

    def targets(self, task: str) -> np.ndarray:
        return {"mlm": self.mlm_targets, "pos": self.pos_targets,
                "ner": self.ner_targets, "dep": self.dep_targets}[task]

    def to_json(self) -> str:
        doc = {
            "input_ids": self.input_ids.tolist(),
            "segment_ids": self.segment_ids.tolist(),
            "masked_positions": np.flatnonzero(self.is_masked).tolist(),
            "mlm_targets": self.mlm_targets[self.is_masked].tolist(),
            "pos_targets": self.pos_targets[self.is_masked].tolist(),
            "ner_targets": self.ner_targets[self.is_masked].tolist(),
            "dep_targets": self.dep_targets[self.is_masked].tolist(),
            "corruption": self.corruption[self.is_masked].tolist(),
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "MaskedExample":
        doc = json.loads(line)
        ids = np.asarray(doc["input_ids"], dtype=np.int64)
        pos = np.asarray(doc["masked_positions"], dtype=np.int64)
        is_masked = np.zeros(len(ids), dtype=bool)
        is_masked[pos] = True

        def scatter(key, dtype=np.int64, fill=NO_TARGET):
            out = np.full(len(ids), fill, dtype=dtype)
            out[pos] = doc[key]
            return out

        return cls(ids, np.asarray(doc["segment_ids"], dtype=np.int64), is_masked,
                   scatter("mlm_targets"), scatter("pos_targets"), scatter("ner_targets"),
                   scatter("dep_targets"), scatter("corruption", np.int8, NONE))


def sentence_rng(seed: int, step: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, step/epoch, sentence index)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & (2**64 - 1), step, index])))


def masking_budget(n_subtokens: int, rng: np.random.Generator, cfg: MaskingConfig) -> int:
    target = cfg.mask_ratio * n_subtokens
    if cfg.budget_rounding == "ceil":
        return max(1, math.ceil(target))
    base = math.floor(target)
    return max(1, base + int(rng.random() < target - base))


def select_spans(word_lengths: Sequence[int], rng: np.random.Generator,
                 cfg: MaskingConfig) -> list[tuple[int, int]]:
    """Choose non-overlapping word n-grams ``[start, end)`` covering the subtoken budget.

    Start words are visited in random order; each draws an n-gram length and
    shrinks it until the span fits inside the sentence, avoids earlier spans and
    stays within the remaining budget. If nothing fits, one random word is
    masked so every example yields at least one prediction.
    """
    n_words = len(word_lengths)
    if n_words < 1:
        raise ValueError("select_spans needs at least one word")
    lengths = np.asarray(word_lengths, dtype=np.int64)
    budget = masking_budget(int(lengths.sum()), rng, cfg)
    taken = np.zeros(n_words, dtype=bool)
    spans = []
    covered = 0
    ns = np.arange(1, len(cfg.ngram_weights) + 1)
    for start in rng.permutation(n_words):
        if covered >= budget:
            break
        if taken[start]:
            continue
        n = int(rng.choice(ns, p=cfg.ngram_weights))
        while n >= 1:
            end = start + n
            if end <= n_words and not taken[start:end].any() \
                    and covered + lengths[start:end].sum() <= budget:
                taken[start:end] = True
                covered += int(lengths[start:end].sum())
                spans.append((int(start), int(end)))
                break
            n -= 1
    if not spans:
        w = int(rng.integers(n_words))
        spans.append((w, w + 1))
    return sorted(spans)


def lmlm_mask_vocabulary(mode: str, tagsets: dict[str, TagSet] | None = None,
                         corpus: Sequence[AnnotatedSentence] | None = None) -> list[str]:
    """Names of the extra mask tokens a LMLM mode needs, in a stable order."""
    tagsets = tagsets or TAGSETS
    if mode == "off":
        raise MaskingConfigError("lmlm_mask_vocabulary requires a mode other than 'off'")
    if mode in TASKS:
        return [_single_token(mode, lab) for lab in tagsets[mode].labels]
    if mode == "mix":
        return [_single_token(task, lab) for task in TASKS for lab in tagsets[task].labels]
    if mode == "all":
        if not corpus:
            raise MaskingConfigError("mode 'all' needs a non-empty corpus to enumerate tag triples")
        triples = {(w.pos, w.ner, w.dep) for s in corpus for w in s.words}
        order = sorted(triples, key=lambda tr: tuple(tagsets[t].id_of(x) for t, x in zip(TASKS, tr)))
        return [_composite_token(*tr) for tr in order]
    raise MaskingConfigError(f"unknown lmlm mode {mode!r}")


def _single_token(task: str, label: str) -> str:
    return f"[MASK-{task.upper()}-{label}]"


def _composite_token(pos: str, ner: str, dep: str) -> str:
    return f"[MASK-ALL-{pos}-{ner}-{dep}]"


def lmlm_mask_token_for(tags: dict[str, str], mode: str, rng: np.random.Generator | None = None,
                        vocab: Vocab | None = None) -> str:
    """Mask token carrying the masked word's tag(s); ``tags`` maps task -> label."""
    if mode in TASKS:
        return _single_token(mode, tags[mode])
    if mode == "mix":
        task = TASKS[int(rng.integers(3))]
        return _single_token(task, tags[task])
    if mode == "all":
        tok = _composite_token(tags["pos"], tags["ner"], tags["dep"])
        if vocab is not None and tok not in vocab:
            events["all_fallback"] += 1
            return MASK
        return tok
    raise MaskingConfigError(f"lmlm_mask_token_for requires a mode other than 'off', got {mode!r}")


def extend_vocab_for_lmlm(vocab: Vocab, cfg: MaskingConfig,
                          corpus: Sequence[AnnotatedSentence] | None = None) -> Vocab:
    if cfg.lmlm_mode == "off":
        return vocab
    v = vocab.copy()
    v.add_tokens(lmlm_mask_vocabulary(cfg.lmlm_mode, corpus=corpus))
    return v


def apply_masking(enc: EncodedSentence, spans: Sequence[tuple[int, int]], rng: np.random.Generator,
                  cfg: MaskingConfig, vocab: Vocab) -> MaskedExample:
    n = len(enc)
    input_ids = enc.token_ids.copy()
    is_masked = np.zeros(n, dtype=bool)
    corruption = np.zeros(n, dtype=np.int8)
    for start, end in spans:
        s0, e0 = enc.word_spans[start][0], enc.word_spans[end - 1][1]
        is_masked[s0:e0] = True
    p_mask, p_keep, _ = cfg.corruption_split
    lo, hi = vocab.regular_ids.start, vocab.regular_ids.stop
    for i in np.flatnonzero(is_masked):
        u = rng.random()
        if u < p_mask:
            corruption[i] = MASKED
            if cfg.lmlm_mode == "off":
                input_ids[i] = vocab.mask_id
            else:
                tags = {t: TAGSETS[t].label_of(int(enc.tag_ids(t)[i])) for t in TASKS}
                input_ids[i] = vocab.id_of(lmlm_mask_token_for(tags, cfg.lmlm_mode, rng, vocab))
        elif u < p_mask + p_keep:
            corruption[i] = KEPT
        else:
            corruption[i] = RANDOM
            input_ids[i] = int(rng.integers(lo, hi))

    def only_masked(a):
        return np.where(is_masked, a, NO_TARGET)

    return MaskedExample(
        input_ids=input_ids,
        segment_ids=enc.segment_ids.copy(),
        is_masked=is_masked,
        mlm_targets=only_masked(enc.token_ids),
        pos_targets=only_masked(enc.pos_ids),
        ner_targets=only_masked(enc.ner_ids),
        dep_targets=only_masked(enc.dep_ids),
        corruption=corruption,
    )


def mask_sentence(enc: EncodedSentence, rng: np.random.Generator, cfg: MaskingConfig,
                  vocab: Vocab) -> MaskedExample:
    lengths = [e - s for s, e in enc.word_spans]
    spans = select_spans(lengths, rng, cfg)
    return apply_masking(enc, spans, rng, cfg, vocab)
