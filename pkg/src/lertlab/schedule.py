"""Per-task loss-weight ramps and combined-loss assembly.

Each linguistic task's weight grows linearly from 0 at step 0 to 1 at its end
step and stays there. The order presets name the tasks from fastest to
slowest ramp; the fastest ends at 1/6 of training, then 1/3, then 1/2.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

from .tags import TASKS


class ScheduleConfigError(ValueError):
    pass


RANK_FRACTIONS = (Fraction(1, 6), Fraction(1, 3), Fraction(1, 2))
_INITIAL = {"P": "pos", "N": "ner", "D": "dep"}
PRESETS = ("PND", "PDN", "NPD", "DNP", "none")


def lambda_at(t: int, T: int) -> float:
    if T < 1:
        raise ScheduleConfigError(f"ramp end step must be >= 1, got {T}")
    if t < 0:
        raise ScheduleConfigError(f"step must be >= 0, got {t}")
    return min(t / T, 1.0)


def preset_fractions(name: str) -> dict[str, Fraction | None]:
    """End-step fractions per task; ``None`` means the weight is fixed at 1."""
    if name == "none":
        return {task: None for task in TASKS}
    if name not in PRESETS:
        raise ScheduleConfigError(f"unknown schedule preset {name!r}")
    return {_INITIAL[ch]: frac for ch, frac in zip(name, RANK_FRACTIONS)}


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int
    preset: str = "PND"
    tasks: tuple[str, ...] = TASKS
    end_fractions: dict[str, float] | None = None  # overrides the preset's fractions

    def __post_init__(self):
        if self.total_steps < 1:
            raise ScheduleConfigError("total_steps must be >= 1")
        preset_fractions(self.preset)
        object.__setattr__(self, "tasks", tuple(self.tasks))
        for task in self.tasks:
            if task not in TASKS:
                raise ScheduleConfigError(f"unknown task {task!r}")
        if self.end_fractions:
            for task, f in self.end_fractions.items():
                if task not in TASKS or not 0 < f <= 1:
                    raise ScheduleConfigError(f"bad end fraction {task}={f}")

    def fractions(self) -> dict[str, Fraction | None]:
        fr = preset_fractions(self.preset)
        if self.end_fractions:
            for task, f in self.end_fractions.items():
                fr[task] = Fraction(f).limit_denominator(10**9)
        return fr

    def end_steps(self) -> dict[str, int | None]:
        """T per task, rounded up so a ramp never finishes before its stated fraction."""
        return {task: (None if f is None else max(1, math.ceil(f * self.total_steps)))
                for task, f in self.fractions().items()}


@dataclass(frozen=True)
class ScheduleState:
    t: int
    lambdas: dict[str, float] = field(default_factory=dict)

    @property
    def lambda_pos(self) -> float:
        return self.lambdas["pos"]

    @property
    def lambda_ner(self) -> float:
        return self.lambdas["ner"]

    @property
    def lambda_dep(self) -> float:
        return self.lambdas["dep"]

    def as_tuple(self) -> tuple[float, float, float]:
        return tuple(self.lambdas[t] for t in TASKS)


def state_at(cfg: ScheduleConfig, t: int) -> ScheduleState:
    ends = cfg.end_steps()
    lams = {}
    for task in TASKS:
        if task not in cfg.tasks:
            lams[task] = 0.0
        elif ends[task] is None:
            lams[task] = 1.0
        else:
            lams[task] = lambda_at(t, ends[task])
    return ScheduleState(t, lams)


def combine_losses(mlm_loss: float, task_losses: dict[str, float], state: ScheduleState) -> float:
    """MLM loss plus each task loss scaled by its current weight."""
    total = mlm_loss
    for task in TASKS:
        total += state.lambdas[task] * task_losses.get(task, 0.0)
    return total


def trace_csv(cfg: ScheduleConfig, steps: Iterable[int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "lambda_P", "lambda_N", "lambda_D"])
    for t in steps:
        s = state_at(cfg, t)
        w.writerow([t, *(repr(x) for x in s.as_tuple())])
    return buf.getvalue()
