"""Tests for run files and the output directory."""

from pathlib import Path

import pytest

from data.config import (
    DEFAULT_OUTPUT_DIR,
    OUTPUT_DIR_ENV,
    default_map,
    load_run_file,
    normalise_key,
    output_dir,
    parse_run_file,
)
from opd.errors import ConfigurationError


def test_parse_run_file():
    text = """
    # shared settings
    lambda = calibrate:0.9
    alpha = 0.05   # two-sided
    --M = 20000
    loocv-refit = true
    """
    assert parse_run_file(text) == {
        "lam": "calibrate:0.9",
        "alpha": "0.05",
        "m": "20000",
        "loocv_refit": "true",
    }


def test_normalise_key():
    assert normalise_key("--Value-Column") == "value_column"
    assert normalise_key("lambda") == "lam"


def test_bad_lines_are_reported_with_location():
    with pytest.raises(ConfigurationError, match="run.cfg:2"):
        parse_run_file("alpha = 0.1\nseed 42\n", source="run.cfg")
    with pytest.raises(ConfigurationError, match="set twice"):
        parse_run_file("seed = 1\nseed = 2\n")


def test_load_run_file(tmp_path: Path):
    filepath = tmp_path / "run.cfg"
    filepath.write_text("seed = 7\n")
    assert load_run_file(filepath) == {"seed": "7"}
    with pytest.raises(ConfigurationError):
        load_run_file(tmp_path / "absent.cfg")


def test_default_map_offers_settings_to_every_command():
    mapping = default_map({"seed": "7"}, ["fit", "predict"])
    assert mapping == {"fit": {"seed": "7"}, "predict": {"seed": "7"}}
    mapping["fit"]["seed"] = "8"
    assert mapping["predict"]["seed"] == "7"


def test_output_dir(monkeypatch, tmp_path: Path):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)
    assert output_dir() == DEFAULT_OUTPUT_DIR
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path))
    assert output_dir() == tmp_path
