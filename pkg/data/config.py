"""Flat key = value run files.

Keys use the option names of the CLI (dashes or underscores); explicit
command-line flags override whatever the file says.

    # run.cfg
    lambda = calibrate:0.9
    alpha = 0.05
    M = 100000
    seed = 42
    covariates = dist,soil:cat,ffreq:cat,x:std
"""

import os
from pathlib import Path

from opd.errors import ConfigurationError

OUTPUT_DIR_ENV = "OPD_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = Path(__file__).resolve().parent.parent / "output"

# option names whose parameter name differs from the flag
ALIASES = {"lambda": "lam"}


def normalise_key(key: str) -> str:
    key = key.strip().lstrip("-").lower().replace("-", "_")
    return ALIASES.get(key, key)


def parse_run_file(text: str, source: str = "<config>") -> dict[str, str]:
    settings: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        name = normalise_key(key)
        if name in settings:
            raise ConfigurationError(f"{source}:{lineno}: '{key.strip()}' set twice")
        settings[name] = value.strip()
    return settings


def load_run_file(filepath: Path) -> dict[str, str]:
    if not filepath.exists():
        raise ConfigurationError(f"Config file not found: {filepath}")
    return parse_run_file(filepath.read_text(), source=filepath.name)


def default_map(settings: dict[str, str], commands) -> dict[str, dict[str, str]]:
    """The same settings offered to every command; each command picks the keys it knows."""
    return {name: dict(settings) for name in commands}


def output_dir() -> Path:
    override = os.environ.get(OUTPUT_DIR_ENV)
    return Path(override) if override else DEFAULT_OUTPUT_DIR
