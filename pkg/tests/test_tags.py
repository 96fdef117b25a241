import re

import pytest
from hypothesis import given, strategies as st

from lertlab.tags import (DEP, NER, POS, SchemaError, TagSet, bieos_spans, builtin_tagsets, tagsets_json,
                          validate_bieos)


def test_builtin_sizes():
    pos, ner, dep = builtin_tagsets()
    assert (len(pos), len(ner), len(dep)) == (28, 13, 14)


def test_builtin_labels_exact():
    assert POS.labels[:3] == ("n", "v", "wp")
    assert POS.labels[-1] == "x"
    assert set(NER.labels) == {"O", "S-Ni", "S-Ns", "S-Nh", "B-Ni", "I-Ni", "E-Ni",
                               "B-Nh", "I-Nh", "E-Nh", "B-Ns", "I-Ns", "E-Ns"}
    assert DEP.labels == ("ATT", "WP", "ADV", "VOB", "SBV", "COO", "RAD", "HED", "POB", "CMP",
                          "LAD", "FOB", "DBL", "IOB")


@pytest.mark.parametrize("ts", builtin_tagsets(), ids=lambda t: t.name)
def test_index_bijection(ts):
    assert sorted(ts.index.values()) == list(range(len(ts)))
    for i in range(len(ts)):
        assert ts.id_of(ts.label_of(i)) == i


def test_labels_case_sensitive():
    with pytest.raises(SchemaError):
        POS.id_of("N")


def test_duplicate_labels_rejected():
    with pytest.raises(SchemaError):
        TagSet("POS", ("n", "n"))


def test_json_round_trip():
    for ts in builtin_tagsets():
        back = TagSet.from_json(ts.to_json())
        assert back.labels == ts.labels and back.name == ts.name
    assert '"S-Nh"' in tagsets_json()


@pytest.mark.parametrize("tags,valid,pos", [
    (["O", "S-Nh", "O"], True, None),
    (["B-Ni", "I-Ni", "E-Ni"], True, None),
    (["I-Ns", "O"], False, 0),
    (["B-Ni", "E-Nh"], False, 1),
    (["B-Ni", "O"], False, 1),
    (["B-Ns"], False, 1),
    ([], True, None),
])
def test_validate_bieos_examples(tags, valid, pos):
    v = validate_bieos(tags)
    assert v.valid is valid
    assert v.position == pos


def test_validate_bieos_unknown_label():
    with pytest.raises(SchemaError):
        validate_bieos(["O", "B-PER"])


# Independent regex oracle for BIEOS well-formedness.
_SPAN = r"(?:O|S-(?:Ni|Ns|Nh)|B-Ni(?: I-Ni)* E-Ni|B-Nh(?: I-Nh)* E-Nh|B-Ns(?: I-Ns)* E-Ns)"
_ORACLE = re.compile(rf"^(?:{_SPAN}(?: {_SPAN})*)?$")


def oracle_valid(tags):
    return bool(_ORACLE.match(" ".join(tags)))


@st.composite
def legal_sequences(draw):
    out = []
    for _ in range(draw(st.integers(0, 6))):
        shape = draw(st.sampled_from(["O", "S", "BE", "BIE"]))
        et = draw(st.sampled_from(["Ni", "Ns", "Nh"]))
        if shape == "O":
            out.append("O")
        elif shape == "S":
            out.append(f"S-{et}")
        else:
            n_inside = 0 if shape == "BE" else draw(st.integers(1, 3))
            out += [f"B-{et}"] + [f"I-{et}"] * n_inside + [f"E-{et}"]
    return out


@given(legal_sequences())
def test_accepts_concatenated_legal_spans(tags):
    assert validate_bieos(tags).valid
    assert oracle_valid(tags)


@given(legal_sequences().filter(bool), st.data())
def test_single_substitution_matches_oracle(tags, data):
    i = data.draw(st.integers(0, len(tags) - 1))
    new = data.draw(st.sampled_from([t for t in NER.labels if t != tags[i]]))
    mutated = tags[:i] + [new] + tags[i + 1:]
    assert validate_bieos(mutated).valid == oracle_valid(mutated)


@given(legal_sequences().filter(bool), st.data())
def test_span_breaking_corruption_rejected(tags, data):
    # Inserting a dangling I-/E- tag or opening an unclosed B- always breaks the structure.
    i = data.draw(st.integers(0, len(tags)))
    et = data.draw(st.sampled_from(["Ni", "Ns", "Nh"]))
    bad = data.draw(st.sampled_from([f"I-{et}", f"E-{et}"]))
    # place the corruption at a span boundary, where no span is open
    boundaries = [0] + [j + 1 for j, t in enumerate(tags) if t == "O" or t[0] in "SE"]
    at = boundaries[i % len(boundaries)]
    assert not validate_bieos(tags[:at] + [bad] + tags[at:]).valid
    assert not validate_bieos(tags + [f"B-{et}"]).valid


def test_bieos_spans():
    assert bieos_spans(["O", "B-Nh", "I-Nh", "E-Nh", "S-Ns"]) == [(1, 4, "Nh"), (4, 5, "Ns")]
    assert bieos_spans(["I-Nh", "E-Nh"]) == []
