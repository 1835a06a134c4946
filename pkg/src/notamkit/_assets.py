from __future__ import annotations

from functools import lru_cache
from importlib import resources
from string import Template


def asset_path(name: str):
    return resources.files("notamkit") / "assets" / name


@lru_cache(maxsize=None)
def read_asset(name: str) -> str:
    return asset_path(name).read_text(encoding="utf-8")


def prompt(name: str, **values) -> str:
    text = read_asset(f"prompts/{name}.txt")
    return Template(text).safe_substitute(**values).strip() if values else text.strip()
