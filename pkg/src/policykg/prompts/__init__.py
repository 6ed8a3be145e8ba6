"""Versioned prompt catalog.

Templates are plain text files named ``<name>.<version>.txt`` and use
``$placeholder`` substitution so JSON braces need no escaping.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from string import Template

DEFAULT_VERSION = "v1"
_version = DEFAULT_VERSION


@dataclass(frozen=True)
class Prompt:
    name: str
    version: str
    text: str

    @property
    def ref(self) -> str:
        return f"{self.name}@{self.version}"

    def render(self, **values: object) -> str:
        return Template(self.text).substitute({k: str(v) for k, v in values.items()})


def available_versions() -> set[str]:
    files = resources.files(__name__).iterdir()
    return {f.name.split(".")[-2] for f in files if f.name.endswith(".txt")}


def use_version(version: str) -> None:
    """Select the catalog version used when ``load_prompt`` gets none."""
    global _version
    if version not in available_versions():
        raise ValueError(f"unknown prompt catalog version {version!r}")
    _version = version


def load_prompt(name: str, version: str | None = None) -> Prompt:
    return _load(name, version or _version)


@lru_cache(maxsize=None)
def _load(name: str, version: str) -> Prompt:
    text = resources.files(__name__).joinpath(f"{name}.{version}.txt").read_text(encoding="utf-8")
    return Prompt(name, version, text)
