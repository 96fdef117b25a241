"""Linguistic tag inventories (POS, NER, DEP) and BIEOS sequence validation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

POS_LABELS = (
    "n", "v", "wp", "u", "d", "a", "m", "p", "r", "ns", "c", "q", "nt", "nh",
    "nd", "j", "i", "b", "ni", "nz", "nl", "z", "k", "ws", "o", "h", "e", "x",
)
NER_LABELS = (
    "O", "S-Ni", "S-Ns", "S-Nh",
    "B-Ni", "I-Ni", "E-Ni",
    "B-Nh", "I-Nh", "E-Nh",
    "B-Ns", "I-Ns", "E-Ns",
)
DEP_LABELS = (
    "ATT", "WP", "ADV", "VOB", "SBV", "COO", "RAD", "HED", "POB", "CMP",
    "LAD", "FOB", "DBL", "IOB",
)

TASKS = ("pos", "ner", "dep")


class SchemaError(ValueError):
    """A label is not a member of the inventory it was checked against."""


@dataclass(frozen=True)
class TagSet:
    name: str
    labels: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        labels = tuple(self.labels)
        if len(set(labels)) != len(labels):
            raise SchemaError(f"duplicate labels in tag set {self.name}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "index", {lab: i for i, lab in enumerate(labels)})

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label) -> bool:
        return label in self.index

    def id_of(self, label: str) -> int:
        try:
            return self.index[label]
        except KeyError:
            raise SchemaError(f"unknown {self.name} label {label!r}") from None

    def label_of(self, i: int) -> str:
        if not 0 <= i < len(self.labels):
            raise SchemaError(f"{self.name} id {i} out of range")
        return self.labels[i]

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "labels": list(self.labels)}, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "TagSet":
        doc = json.loads(text)
        return cls(doc["name"], tuple(doc["labels"]))


POS = TagSet("POS", POS_LABELS)
NER = TagSet("NER", NER_LABELS)
DEP = TagSet("DEP", DEP_LABELS)

TAGSETS = {"pos": POS, "ner": NER, "dep": DEP}


def builtin_tagsets() -> tuple[TagSet, TagSet, TagSet]:
    return POS, NER, DEP


def tagsets_json() -> str:
    """All three inventories as one JSON document, in POS/NER/DEP order."""
    docs = [{"name": ts.name, "labels": list(ts.labels)} for ts in builtin_tagsets()]
    return json.dumps(docs, ensure_ascii=False, indent=2)


@dataclass(frozen=True)
class BieosVerdict:
    valid: bool
    position: int | None = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.valid


def validate_bieos(tags: Sequence[str]) -> BieosVerdict:
    """Check that ``tags`` is a concatenation of O, S-X and B-X (I-X)* E-X spans.

    Returns a verdict carrying the first violating position. A span left open
    at the end of the sequence is reported at ``len(tags)``.
    """
    for tag in tags:
        NER.id_of(tag)
    open_type = None
    for i, tag in enumerate(tags):
        prefix, _, etype = tag.partition("-")
        if prefix in ("O", "S", "B"):
            if open_type is not None:
                return BieosVerdict(False, i, f"{tag} inside open {open_type} span")
            if prefix == "B":
                open_type = etype
        else:  # I or E
            if open_type is None:
                return BieosVerdict(False, i, f"{tag} without preceding B-{etype}")
            if etype != open_type:
                return BieosVerdict(False, i, f"{tag} inside {open_type} span")
            if prefix == "E":
                open_type = None
    if open_type is not None:
        return BieosVerdict(False, len(tags), f"unterminated {open_type} span")
    return BieosVerdict(True)


def bieos_spans(tags: Sequence[str]) -> list[tuple[int, int, str]]:
    """Extract well-formed (start, end, type) entity spans; malformed fragments are dropped."""
    spans = []
    start = etype = None
    for i, tag in enumerate(tags):
        prefix, _, t = tag.partition("-")
        if prefix == "S":
            spans.append((i, i + 1, t))
            start = None
        elif prefix == "B":
            start, etype = i, t
        elif prefix == "I":
            if start is None or t != etype:
                start = None
        elif prefix == "E":
            if start is not None and t == etype:
                spans.append((start, i + 1, t))
            start = None
        else:
            start = None
    return spans
