"""Config layer: defaults, TOML merge, overrides, validation, hashing."""

import pytest

from factorcodec.config import (
    DEFAULTS,
    ConfigError,
    build_stage1_configs,
    build_stage2_configs,
    config_hash,
    default_config,
    load_config,
)


def test_defaults_complete():
    cfg = load_config()
    assert set(cfg) == {"data", "stage1", "stage2", "lm", "sampling"}
    for section, values in DEFAULTS.items():
        assert cfg[section] == values


def test_default_config_is_a_copy():
    cfg = default_config()
    cfg["stage1"]["steps"] = 1
    assert DEFAULTS["stage1"]["steps"] != 1


def test_toml_file_merges_over_defaults(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("[stage1]\nsteps = 7\nlr = 0.001\n\n[data]\nspeakers = 2\n")
    cfg = load_config(path)
    assert cfg["stage1"]["steps"] == 7
    assert cfg["stage1"]["lr"] == 0.001
    assert cfg["data"]["speakers"] == 2
    # untouched keys keep their defaults
    assert cfg["stage1"]["batch_size"] == DEFAULTS["stage1"]["batch_size"]


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("[nonsense]\nx = 1\n")
    with pytest.raises(ConfigError, match="unknown config section"):
        load_config(path)


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("[stage1]\nbogus = 1\n")
    with pytest.raises(ConfigError, match="unknown key 'bogus'"):
        load_config(path)


def test_invalid_toml_rejected(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("[stage1\nsteps = ")
    with pytest.raises(ConfigError, match="not valid TOML"):
        load_config(path)


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.toml")


def test_overrides_parse_toml_literals():
    cfg = load_config(overrides=["stage1.steps=9", "data.min_duration_s=0.5"])
    assert cfg["stage1"]["steps"] == 9
    assert isinstance(cfg["stage1"]["steps"], int)
    assert cfg["data"]["min_duration_s"] == 0.5


def test_override_list_value():
    cfg = load_config(overrides=["stage2.upsample_factors=[10, 8, 6, 1]"])
    assert cfg["stage2"]["upsample_factors"] == [10, 8, 6, 1]


def test_override_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(overrides=["stage1.bogus=1"])


def test_override_bad_shape_rejected():
    with pytest.raises(ConfigError, match="section.key=value"):
        load_config(overrides=["stage1.steps"])  # no value
    with pytest.raises(ConfigError, match="section.key"):
        load_config(overrides=["steps=9"])  # no section
    with pytest.raises(ConfigError, match="section.key"):
        load_config(overrides=["a.b.c=9"])  # too many dots


def test_type_mismatch_rejected():
    with pytest.raises(ConfigError, match="must be a number"):
        load_config(overrides=["stage1.steps=fast"])
    with pytest.raises(ConfigError, match="must be a list"):
        load_config(overrides=["stage2.upsample_factors=480"])


def test_value_constraints():
    with pytest.raises(ConfigError, match="min_duration_s"):
        load_config(overrides=["data.min_duration_s=2.0", "data.max_duration_s=1.0"])
    with pytest.raises(ConfigError, match="steps"):
        load_config(overrides=["lm.steps=0"])


def test_config_hash_stable_and_sensitive():
    a = load_config()
    b = load_config()
    assert config_hash(a) == config_hash(b)
    c = load_config(overrides=["stage1.steps=3"])
    assert config_hash(a) != config_hash(c)


def test_build_stage1_configs():
    cfg = load_config(overrides=["stage1.steps=11", "stage1.grl_lambda=0.7"])
    model_cfg, train_cfg = build_stage1_configs(cfg)
    assert model_cfg.content_levels == (4,) * 8
    assert model_cfg.grl_lambda == 0.7
    assert train_cfg.steps == 11
    assert train_cfg.weights.w_mel == DEFAULTS["stage1"]["w_mel"]


def test_build_stage2_configs():
    cfg = load_config()
    model_cfg, train_cfg = build_stage2_configs(
        cfg, content_dim=8, prosody_dim=6, timbre_dim=6
    )
    assert model_cfg.fusion_levels == (4,) * 8
    assert model_cfg.content_dim == 8
    assert model_cfg.upsample_factors == (8, 6, 5, 2)
    assert train_cfg.w_mel == 15.0
