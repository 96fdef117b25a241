import json

import pytest

from lertlab import config as C


def test_defaults_resolve(monkeypatch):
    monkeypatch.delenv(C.SEED_ENV, raising=False)
    cfg = C.resolve()
    assert cfg["seed"] == 0
    assert cfg["masking"]["mask_ratio"] == 0.15
    assert C.schedule_config(cfg).total_steps == cfg["optimizer"]["total_steps"]


def test_seed_from_environment(monkeypatch):
    monkeypatch.setenv(C.SEED_ENV, "17")
    assert C.resolve()["seed"] == 17
    assert C.resolve({"seed": 3})["seed"] == 3


def test_dotted_overrides_and_alias():
    cfg = C.resolve(None, {"schedule.preset": "DNP", "lmlm.mode": "pos", "optimizer.total_steps": 50,
                           "optimizer.warmup_steps": 5})
    assert cfg["schedule"]["preset"] == "DNP"
    assert cfg["masking"]["lmlm_mode"] == "pos"
    assert C.optimizer_config(cfg).total_steps == 50


@pytest.mark.parametrize("over", [{"schedule.bogus": 1}, {"masking.mask_ratio": 2.0},
                                  {"schedule.preset": "XYZ"}, {"probe.tasks": ["srl"]},
                                  {"model.hidden": 30, "model.heads": 4}])
def test_invalid_configs(over):
    with pytest.raises(C.ConfigError):
        C.resolve(None, over)


def test_load_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"schedule": {"preset": "NPD"}}))
    assert C.load(p)["schedule"]["preset"] == "NPD"
    assert C.load(p, {"schedule.preset": "PDN"})["schedule"]["preset"] == "PDN"
    with pytest.raises(FileNotFoundError):
        C.load(tmp_path / "missing.json")
    p.write_text("{")
    with pytest.raises(C.ConfigError):
        C.load(p)


def test_parse_value():
    assert C.parse_value("3") == 3
    assert C.parse_value("[\"pos\"]") == ["pos"]
    assert C.parse_value("PND") == "PND"


def test_model_config_from_preset():
    cfg = C.resolve(None, {"model.preset": "base"})
    m = C.model_config(cfg, 21128)
    assert (m.layers, m.hidden, m.heads, m.vocab) == (12, 768, 12, 21128)


def test_dumps_round_trip():
    cfg = C.resolve()
    assert C.resolve(json.loads(C.dumps(cfg))) == cfg
