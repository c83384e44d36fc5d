import os

import pytest

from src import env_config
from src.env_config import EnvConfig, parse_grid


def test_threads(monkeypatch):
    monkeypatch.setenv("KMS_HODGE_THREADS", "3")
    assert EnvConfig.get_threads() == 3
    monkeypatch.setenv("KMS_HODGE_THREADS", "0")
    assert EnvConfig.get_threads() == (os.cpu_count() or 1)


def test_defaults():
    assert EnvConfig.get_seed() == 0
    assert EnvConfig.get_tolerance() == 1e-10
    assert EnvConfig.get_default_output_format() == "json"
    assert EnvConfig.get_log_level() == "INFO"
    assert EnvConfig.get_grid() == (64, 64)


def test_log_level_is_upper_cased(monkeypatch):
    monkeypatch.setenv("KMS_HODGE_LOG_LEVEL", "debug")
    assert EnvConfig.get_log_level() == "DEBUG"


def test_grid_from_environment(monkeypatch):
    monkeypatch.setenv("KMS_HODGE_GRID", "32x16")
    assert EnvConfig.get_grid() == (32, 16)


def test_parse_grid():
    assert parse_grid("128X64") == (128, 64)
    assert parse_grid(" 16 x 16 ") == (16, 16)
    for bad in ("32", "4x4", "axb", "8x8x8"):
        with pytest.raises(ValueError):
            parse_grid(bad)


def test_validate_config_falls_back_to_json(monkeypatch):
    monkeypatch.setenv("KMS_HODGE_OUTPUT_FORMAT", "xml")
    status = EnvConfig.validate_config()
    assert status["output_format"] == "json"
    assert status["grid"] == "64x64"


def test_env_file_is_loaded_once(monkeypatch):
    calls = []
    monkeypatch.setattr(EnvConfig, "_loaded", False)
    monkeypatch.setattr(env_config, "load_dotenv", lambda path: calls.append(path))
    EnvConfig.load_env("custom.env")
    EnvConfig.get_seed()
    assert calls == ["custom.env"]
