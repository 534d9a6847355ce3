import json

import pytest

from planprobe.config import (SEED_ENV_VAR, EvalConfig, ProbesConfig,
                              RunConfig, SlicingConfig, apply_seed_override,
                              config_from_dict, derive_seed, load_config,
                              write_resolved_config)
from planprobe.errors import ConfigError


def test_defaults_validate():
    cfg = RunConfig()
    cfg.validate()
    assert cfg.seed == 0
    assert cfg.probes.gamma == 0.995
    assert cfg.slicing.slice_len == 64
    assert cfg.eval.episodes == 200


def test_resolved_dict_roundtrips_through_from_dict():
    cfg = RunConfig(seed=9)
    again = config_from_dict(cfg.resolved_dict())
    assert again == cfg


def test_unknown_top_level_key_named():
    with pytest.raises(ConfigError, match="bogus"):
        config_from_dict({"bogus": 1})


def test_unknown_section_key_named():
    with pytest.raises(ConfigError, match="slice_lenn"):
        config_from_dict({"slicing": {"slice_lenn": 32}})


def test_non_dict_section_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({"probes": 7})


def test_non_integer_seed_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({"seed": "zero"})
    with pytest.raises(ConfigError):
        config_from_dict({"seed": True})


def test_ability_set_not_configurable():
    with pytest.raises(ConfigError, match="ability_set"):
        config_from_dict({"env": {"ability_set": ["x"]}})


@pytest.mark.parametrize("section,field,bad", [
    ("probes", "gamma", 0.0),
    ("probes", "gamma", 1.5),
    ("probes", "mode", "sideways"),
    ("slicing", "slice_len", 0),
    ("slicing", "workers", 0),
    ("slicing", "staleness_bound", -1),
    ("eval", "episodes", 0),
    ("eval", "debounce", 0),
    ("eval", "threshold_quantiles", 1),
])
def test_section_validation(section, field, bad):
    with pytest.raises(ConfigError):
        config_from_dict({section: {field: bad}})


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")


def test_load_config_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{oops")
    with pytest.raises(ConfigError):
        load_config(p)


def test_load_config_applies_file_values(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 5, "probes": {"gamma": 0.99},
                             "slicing": {"workers": 2}}))
    cfg = load_config(p)
    assert cfg.seed == 5
    assert cfg.probes.gamma == 0.99
    assert cfg.slicing.workers == 2
    # untouched sections keep defaults
    assert cfg.eval == EvalConfig()


def test_seed_env_override(tmp_path, monkeypatch):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 5}))
    monkeypatch.setenv(SEED_ENV_VAR, "42")
    assert load_config(p).seed == 42
    monkeypatch.setenv(SEED_ENV_VAR, "not-a-number")
    with pytest.raises(ConfigError):
        load_config(p)


def test_apply_seed_override_without_env(monkeypatch):
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)
    cfg = RunConfig(seed=3)
    assert apply_seed_override(cfg).seed == 3


def test_write_resolved_config(tmp_path):
    cfg = RunConfig(seed=2)
    path = write_resolved_config(cfg, tmp_path)
    data = json.loads(path.read_text())
    assert data["seed"] == 2
    assert "tool_version" in data
    body = {k: v for k, v in data.items() if k != "tool_version"}
    assert config_from_dict(body) == cfg


def test_derive_seed_is_stable_and_spread():
    # pinned values: the whole reproducibility story rests on these
    assert derive_seed(0, "agent") == derive_seed(0, "agent")
    assert derive_seed(0, "agent") != derive_seed(0, "probes")
    assert derive_seed(0, "agent") != derive_seed(1, "agent")
    assert derive_seed(0, "e", 0) != derive_seed(0, "e", 1)
    vals = {derive_seed(7, "episode", i) for i in range(1000)}
    assert len(vals) == 1000
    assert all(0 <= v < 2 ** 64 for v in vals)
