"""TOML configuration loading for the CLI and service.

The default config path comes from the EIARAG_CONFIG environment variable;
every key can be overridden by a CLI flag.
"""

from __future__ import annotations

import os
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ValidationError

CONFIG_ENV_VAR = "EIARAG_CONFIG"


def load_config(path=None) -> dict:
    """Read TOML config from `path`, $EIARAG_CONFIG, or return {}."""
    path = path or os.environ.get(CONFIG_ENV_VAR)
    if not path:
        return {}
    if not os.path.exists(path):
        raise ValidationError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def cfg_get(config: dict, section: str, key: str, default=None):
    return config.get(section, {}).get(key, default)
