"""Versioned prompt assets.

Each ``<name>.txt`` starts with a ``# version: N`` line; the rest is a
:class:`string.Template` body with ``$placeholders``.
"""

from __future__ import annotations

import functools
import re
from dataclasses import dataclass
from pathlib import Path
from string import Template

_DIR = Path(__file__).parent
_VERSION = re.compile(r"^# version: (\d+)\n")


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    version: int
    body: str

    def render(self, **values) -> str:
        return Template(self.body).substitute(values)


@functools.lru_cache(maxsize=None)
def load(name: str) -> PromptTemplate:
    text = (_DIR / f"{name}.txt").read_text(encoding="utf-8")
    m = _VERSION.match(text)
    if not m:
        raise ValueError(f"prompt {name!r} lacks a version header")
    return PromptTemplate(name, int(m.group(1)), text[m.end():])


def available() -> list[str]:
    return sorted(p.stem for p in _DIR.glob("*.txt"))
