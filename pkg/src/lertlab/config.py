"""Run configuration: one nested JSON document with dotted-path overrides."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict
from pathlib import Path
from typing import Any

from .corpus import SynthGrammarConfig
from .masking import MaskingConfig
from .model import PRESETS, ModelConfig
from .schedule import ScheduleConfig
from .tags import TASKS
from .trainer import OptimizerConfig

SEED_ENV = "LERTLAB_SEED"

# keys whose default is None accept any JSON value (validated by the owning module)
DEFAULTS: dict[str, Any] = {
    "seed": None,
    "output_dir": "runs/default",
    "corpus": {
        "train": None,
        "heldout": None,
        "synthetic": {
            "train_seed": 1,
            "heldout_seed": 2,
            "n_train": 4000,
            "n_heldout": 500,
            "grammar": asdict(SynthGrammarConfig()),
        },
    },
    "masking": asdict(MaskingConfig()),
    "model": {
        "preset": "micro",
        "layers": None,
        "hidden": None,
        "heads": None,
        "ffn_inner": None,
        "max_len": None,
        "vocab": None,
        "layernorm_eps": 1e-12,
        "init_std": 0.02,
        "tasks": list(TASKS),
    },
    "schedule": {"preset": "PND", "tasks": list(TASKS), "end_fractions": None},
    "optimizer": {**{k: v for k, v in asdict(OptimizerConfig()).items() if k != "seed"},
                  "peak_lr": 2e-3, "warmup_steps": 200, "total_steps": 2000, "batch_size": 128},
    "probe": {
        "tasks": ["pos", "ner", "dep"],
        "frozen": True,
        "n_sentences": 800,
        "dev_fraction": 0.25,
        "steps": 300,
        "lr": 0.02,
        "seed": 0,
        "eval_seed": 0,
    },
}
# plain JSON types only, so a dumped config reloads to an equal document
DEFAULTS = json.loads(json.dumps(DEFAULTS))

# short aliases accepted by the command line
ALIASES = {"lmlm.mode": "masking.lmlm_mode"}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_dotted(cfg: dict, dotted: str, value: Any) -> dict:
    """Return a copy of ``cfg`` with ``dotted`` (e.g. ``schedule.preset``) replaced."""
    dotted = ALIASES.get(dotted, dotted)
    keys = dotted.split(".")
    nested: Any = value
    for key in reversed(keys):
        nested = {key: nested}
    return _merge(cfg, nested)


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve(doc: dict | None = None, overrides: dict[str, Any] | None = None) -> dict:
    """Defaults <- config document <- dotted overrides, then seed fallback and validation."""
    cfg = _merge(DEFAULTS, doc or {})
    for dotted, value in (overrides or {}).items():
        cfg = set_dotted(cfg, dotted, value)
    if cfg["seed"] is None:
        cfg["seed"] = int(os.environ.get(SEED_ENV, "0"))
    validate(cfg)
    return cfg


def load(path: str | Path | None, overrides: dict[str, Any] | None = None) -> dict:
    doc = None
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file {p} does not exist")
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
    return resolve(doc, overrides)


def masking_config(cfg: dict) -> MaskingConfig:
    return MaskingConfig(**cfg["masking"])


def grammar_config(cfg: dict) -> SynthGrammarConfig:
    return SynthGrammarConfig.from_dict(cfg["corpus"]["synthetic"]["grammar"])


def model_config(cfg: dict, vocab_size: int = 0) -> ModelConfig:
    m = cfg["model"]
    if m["preset"] not in PRESETS:
        raise ConfigError(f"unknown model preset {m['preset']!r}")
    fields = dict(PRESETS[m["preset"]])
    for key in ("layers", "hidden", "heads", "ffn_inner", "max_len", "vocab"):
        if m[key] is not None:
            fields[key] = m[key]
    fields.setdefault("vocab", vocab_size)
    return ModelConfig(layernorm_eps=m["layernorm_eps"], init_std=m["init_std"], tasks=tuple(m["tasks"]), **fields)


def schedule_config(cfg: dict) -> ScheduleConfig:
    s = cfg["schedule"]
    return ScheduleConfig(cfg["optimizer"]["total_steps"], s["preset"], tuple(s["tasks"]), s["end_fractions"])


def optimizer_config(cfg: dict) -> OptimizerConfig:
    return OptimizerConfig(**cfg["optimizer"], seed=cfg["seed"])


def validate(cfg: dict) -> None:
    try:
        masking_config(cfg)
        grammar_config(cfg)
        model_config(cfg)
        schedule_config(cfg)
        optimizer_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    for task in cfg["probe"]["tasks"]:
        if task not in TASKS:
            raise ConfigError(f"unknown probe task {task!r}")
    if not 0 < cfg["probe"]["dev_fraction"] < 1:
        raise ConfigError("probe.dev_fraction must lie in (0, 1)")


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True, ensure_ascii=False)
