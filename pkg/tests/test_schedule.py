import math
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from lertlab.schedule import (PRESETS, ScheduleConfig, ScheduleConfigError, combine_losses, lambda_at,
                              preset_fractions, state_at, trace_csv)


def test_lambda_endpoints():
    assert lambda_at(0, 10) == 0.0
    assert lambda_at(5, 10) == 0.5
    assert lambda_at(10, 10) == 1.0
    assert lambda_at(10**9, 10) == 1.0


@pytest.mark.parametrize("t,T", [(0, 0), (5, -1)])
def test_lambda_rejects_bad_end(t, T):
    with pytest.raises(ScheduleConfigError):
        lambda_at(t, T)


@given(st.integers(1, 10**7), st.data())
def test_lambda_monotone_and_bounded(T, data):
    a = data.draw(st.integers(0, 3 * T))
    b = data.draw(st.integers(a, 3 * T + 1))
    la, lb = lambda_at(a, T), lambda_at(b, T)
    assert 0.0 <= la <= lb <= 1.0
    assert (la == 1.0) == (a >= T)


def test_preset_fractions():
    assert preset_fractions("PND") == {"pos": Fraction(1, 6), "ner": Fraction(1, 3), "dep": Fraction(1, 2)}
    assert preset_fractions("DNP") == {"dep": Fraction(1, 6), "ner": Fraction(1, 3), "pos": Fraction(1, 2)}
    assert preset_fractions("none") == {"pos": None, "ner": None, "dep": None}
    with pytest.raises(ScheduleConfigError):
        preset_fractions("XYZ")


@pytest.mark.parametrize("preset", [p for p in PRESETS if p != "none"])
def test_presets_are_permutations(preset):
    ends = ScheduleConfig(600, preset).end_steps()
    assert sorted(ends.values()) == [100, 200, 300]


def test_none_preset_fixes_weights():
    cfg = ScheduleConfig(100, "none")
    for t in (0, 1, 50, 100):
        assert state_at(cfg, t).as_tuple() == (1.0, 1.0, 1.0)


def test_end_step_rounds_up():
    # 1/6 of 1000 is 166.67; the ramp ends at step 167
    assert ScheduleConfig(1000, "PND").end_steps()["pos"] == 167
    assert ScheduleConfig(1, "PND").end_steps() == {"pos": 1, "ner": 1, "dep": 1}


def test_inactive_task_weight_zero():
    cfg = ScheduleConfig(100, "PND", tasks=("pos",))
    assert state_at(cfg, 100).as_tuple() == (1.0, 0.0, 0.0)


def test_end_fraction_override():
    cfg = ScheduleConfig(100, "PND", end_fractions={"dep": 0.1})
    assert cfg.end_steps()["dep"] == 10
    with pytest.raises(ScheduleConfigError):
        ScheduleConfig(100, "PND", end_fractions={"dep": 0.0})


def test_combine_losses():
    s = state_at(ScheduleConfig(600, "PND"), 100)
    total = combine_losses(2.0, {"pos": 1.0, "ner": 1.0, "dep": 6.0}, s)
    assert total == pytest.approx(2.0 + 1.0 * 1 + 1.0 * 0.5 + 6.0 / 3)


def test_trace_csv_exact_repr():
    text = trace_csv(ScheduleConfig(1_200_000, "PND"), [0, 100_000])
    lines = text.strip().split("\n")
    assert lines[0] == "t,lambda_P,lambda_N,lambda_D"
    assert lines[1] == "0,0.0,0.0,0.0"
    assert lines[2] == f"100000,0.5,0.25,{1/6!r}"


@given(st.integers(6, 10**6), st.sampled_from([p for p in PRESETS if p != "none"]))
def test_rank_order(total, preset):
    cfg = ScheduleConfig(total, preset)
    ends = cfg.end_steps()
    order = [{"P": "pos", "N": "ner", "D": "dep"}[c] for c in preset]
    assert ends[order[0]] <= ends[order[1]] <= ends[order[2]]
    assert ends[order[2]] == math.ceil(total / 2)
