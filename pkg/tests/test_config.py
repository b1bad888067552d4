import pytest

from advnorm.config import (ConfigError, ExperimentConfig, apply_overrides,
                            config_from_dict, dump_config, load_config,
                            save_config)


def test_defaults_round_trip(tmp_path):
    cfg = ExperimentConfig()
    save_config(cfg, tmp_path / "c.toml")
    back = load_config(tmp_path / "c.toml")
    assert back == cfg


def test_modified_round_trip(tmp_path):
    cfg = apply_overrides(ExperimentConfig(), {
        "train.lam": 0.1,
        "train.n_epochs": 3,
        "data.preset": "three_site",
        "eval.bias_alphas": [0.5, 0.9],
        "output_dir": "elsewhere",
    })
    save_config(cfg, tmp_path / "c.toml")
    back = load_config(tmp_path / "c.toml")
    assert back == cfg
    assert back.train.lam == 0.1
    assert back.eval.bias_alphas == (0.5, 0.9)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_dict({"train": {"learning_rate_typo": 1.0}})
    with pytest.raises(ConfigError, match="top-level"):
        config_from_dict({"outputs": "x"})
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), {"nosuch.key": 1})


def test_invalid_value_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({"train": {"lam": -1.0}})
    with pytest.raises(ConfigError):
        config_from_dict({"train": {"n_steps": 0}})


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.toml")


def test_malformed_toml(tmp_path):
    (tmp_path / "bad.toml").write_text("this is = = not toml")
    with pytest.raises(ConfigError, match="TOML"):
        load_config(tmp_path / "bad.toml")


def test_output_root_env(monkeypatch, tmp_path):
    cfg = ExperimentConfig(output_dir="runs/a")
    monkeypatch.setenv("ADVNORM_OUTPUT_ROOT", str(tmp_path))
    assert cfg.resolved_output_dir() == tmp_path / "runs" / "a"
    monkeypatch.delenv("ADVNORM_OUTPUT_ROOT")
    assert str(cfg.resolved_output_dir()) == "runs/a"


def test_dump_is_valid_toml():
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    text = dump_config(ExperimentConfig())
    parsed = tomllib.loads(text)
    assert "train" in parsed and "data" in parsed
