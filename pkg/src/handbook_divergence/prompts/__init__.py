"""Versioned prompt templates shipped as text assets."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

from .._io import sha256_hex

PROMPT_DIR = Path(__file__).resolve().parent

_PLACEHOLDER_RE = re.compile(r"\{(question|passages|answer|answer_a|answer_b)\}")


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    system: str
    user: str
    digest: str

    def render(self, **values: str) -> tuple[str, str]:
        """Fill ``{placeholder}`` slots in one pass (inserted text is never re-scanned)."""

        def sub(m: re.Match) -> str:
            key = m.group(1)
            if key not in values:
                raise KeyError(f"prompt {self.name!r} needs a value for {{{key}}}")
            return values[key]

        return _PLACEHOLDER_RE.sub(sub, self.system), _PLACEHOLDER_RE.sub(sub, self.user)


def parse_template(name: str, text: str) -> PromptTemplate:
    sections: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines():
        stripped = line.strip()
        if stripped in ("[system]", "[user]"):
            current = stripped[1:-1]
            sections[current] = []
        elif current is None:
            continue  # header comments such as "# version: 1"
        else:
            sections[current].append(line)
    if "system" not in sections or "user" not in sections:
        raise ValueError(f"prompt {name!r} must define [system] and [user] sections")
    return PromptTemplate(
        name=name,
        system="\n".join(sections["system"]).strip(),
        user="\n".join(sections["user"]).strip(),
        digest=sha256_hex(text),
    )


def load_prompt(name: str, directory: Path | str | None = None) -> PromptTemplate:
    path = Path(directory or PROMPT_DIR) / f"{name}.txt"
    return parse_template(name, path.read_text(encoding="utf-8"))
