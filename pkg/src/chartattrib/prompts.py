"""Named prompt templates shipped as text assets.

Each asset holds a system message and a user template separated by a
``### USER`` line; placeholders use ``str.format`` syntax.
"""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

SEPARATOR = "### USER"

NAMES = (
    "extract.bar", "extract.pie", "extract.line", "reflect", "refine", "reformulate",
    "caption.row", "caption.col", "caption.cell", "prefilter.row", "prefilter.col", "rerank",
    "som.map", "som.verify", "baseline.bbox",
)


@lru_cache(maxsize=None)
def load(name: str) -> tuple[str, str]:
    """Return ``(system, user_template)`` for a named asset."""
    path = resources.files(__package__).joinpath("prompts").joinpath(f"{name}.txt")
    if not path.is_file():
        raise KeyError(f"unknown prompt template {name!r}")
    text = path.read_text(encoding="utf-8")
    system, sep, user = text.partition(SEPARATOR)
    if not sep:
        return "", text.strip()
    return system.strip(), user.strip()


def render(name: str, **values) -> tuple[str, str]:
    system, user = load(name)
    return system, user.format(**values)


@lru_cache(maxsize=None)
def fewshot() -> dict:
    return json.loads(resources.files(__package__).joinpath("assets").joinpath("fewshot.json").read_text(encoding="utf-8"))


def quoted(text: str) -> str:
    """JSON-quote a header so prompt lines stay unambiguous."""
    return json.dumps(text, ensure_ascii=False)
