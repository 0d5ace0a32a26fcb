"""Prompt templates: packaged defaults, overridable from a directory of text files."""

from __future__ import annotations

import re
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

_PLACEHOLDER = re.compile(r"\{([a-z_0-9]+)\}")


def default_template(name: str) -> str:
    return resources.files("mmretrieval").joinpath("prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")


def render(template: str, **values: str) -> str:
    """Fill ``{name}`` placeholders; unknown placeholders and other braces stay verbatim."""

    def sub(match: re.Match) -> str:
        key = match.group(1)
        return values[key] if key in values else match.group(0)

    return _PLACEHOLDER.sub(sub, template).rstrip("\n")


@dataclass(frozen=True)
class PromptSet:
    summarizer_system: str
    summarizer_user: str
    evaluator_system: str
    evaluator_user: str
    refiner_system: str
    refiner_user: str
    judge_query: str
    judge_similar: str

    @classmethod
    def defaults(cls) -> PromptSet:
        return cls(**{f.name: default_template(f.name) for f in fields(cls)})

    @classmethod
    def from_dir(cls, directory: str | Path) -> PromptSet:
        """Load ``<name>.txt`` overrides from ``directory``; missing files keep the default."""
        directory = Path(directory)
        values = {}
        for f in fields(cls):
            path = directory / f"{f.name}.txt"
            values[f.name] = path.read_text(encoding="utf-8") if path.exists() else default_template(f.name)
        return cls(**values)
