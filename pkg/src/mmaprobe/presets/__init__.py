"""Shipped simulator configurations and the config-file loader."""

from __future__ import annotations

import os
from importlib import resources

from ..simulator import BlockFmaConfig, config_from_text

__all__ = ["PRESET_NAMES", "load_config", "preset_text"]

PRESET_NAMES = ("ampere", "volta_like", "tf32_ampere", "ampere_b16out")


def preset_text(name: str) -> str:
    base = name[:-4] if name.endswith(".cfg") else name
    if base not in PRESET_NAMES:
        raise KeyError(f"unknown preset {name!r}")
    return resources.files(__package__).joinpath(f"{base}.cfg").read_text()


def load_config(spec: str) -> BlockFmaConfig:
    """Load a config from a file path or a shipped preset name."""
    if os.path.exists(spec):
        with open(spec, "r", encoding="utf-8") as fh:
            return config_from_text(fh.read())
    try:
        return config_from_text(preset_text(spec))
    except KeyError:
        raise FileNotFoundError(
            f"no config file {spec!r} and no preset of that name "
            f"(presets: {', '.join(PRESET_NAMES)})") from None
