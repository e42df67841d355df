"""Section-aware chunking with sentence-boundary splitting of oversized sections.

Token rule (``whitespace_punct``): a token is a maximal run of word
characters or a maximal run of punctuation (non-word, non-space)
characters. ``"Hello, world."`` is four tokens.

Chunks record the character offsets of their body slice inside the source
section, so coverage can be checked exactly.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass
from typing import Callable

from .corpus import Handbook

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]+")

# Terminal punctuation (optionally followed by closing quotes/brackets) that
# precedes whitespace, or a blank line.
_BOUNDARY_RE = re.compile(r"[.!?]+[\"')\]”’]*(?=\s)|\n[ \t]*\n")

ABBREVIATIONS = frozenset({
    "dr.", "mr.", "mrs.", "ms.", "prof.", "sr.", "jr.", "st.", "vs.", "etc.",
    "e.g.", "i.e.", "approx.", "no.", "fig.", "dept.", "inc.", "mg.", "min.",
    "hr.", "hrs.", "wk.", "wks.", "mo.", "yr.", "yrs.", "apt.", "ave.",
})


def count_tokens(text: str) -> int:
    return sum(1 for _ in _TOKEN_RE.finditer(text))


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def token_starts(text: str) -> list[int]:
    return [m.start() for m in _TOKEN_RE.finditer(text)]


def _is_abbreviation(text: str, punct_start: int, punct: str) -> bool:
    if punct != ".":
        return False
    start = punct_start
    while start > 0 and not text[start - 1].isspace():
        start -= 1
    word = text[start:punct_start]
    return bool(word) and (word.lower() + ".") in ABBREVIATIONS


def sentence_spans(text: str) -> list[tuple[int, int]]:
    """Contiguous ``(start, end)`` spans that tile ``text``, one per sentence.

    Whitespace between sentences is attached to the preceding span, and any
    leading whitespace to the first, so the spans partition ``[0, len(text))``.
    Whitespace-only input yields no spans.
    """
    if not text.strip():
        return []
    cuts: list[int] = []
    for m in _BOUNDARY_RE.finditer(text):
        if m.group().startswith("\n"):
            end = m.end()
        else:
            punct = m.group().rstrip("\"')]”’")
            if _is_abbreviation(text, m.start(), punct):
                continue
            end = m.end()
        # next sentence starts at the first non-space character after the boundary
        nxt = end
        while nxt < len(text) and text[nxt].isspace():
            nxt += 1
        if nxt < len(text) and (not cuts or nxt > cuts[-1]):
            cuts.append(nxt)
    if cuts and not text[:cuts[0]].strip():
        cuts.pop(0)
    bounds = [0] + cuts + [len(text)]
    return list(zip(bounds, bounds[1:]))


def split_sentences(text: str) -> list[str]:
    return [text[a:b].strip() for a, b in sentence_spans(text)]


TOKEN_RULES: dict[str, Callable[[str], int]] = {"whitespace_punct": count_tokens}
SENTENCE_RULES: dict[str, Callable[[str], list[tuple[int, int]]]] = {"punct_abbrev": sentence_spans}


@dataclass(frozen=True)
class ChunkingConfig:
    max_tokens: int = 512
    sentence_split_rule: str = "punct_abbrev"
    token_rule: str = "whitespace_punct"

    def __post_init__(self) -> None:
        if self.max_tokens < 32:
            raise ValueError("max_tokens must be >= 32")
        if self.sentence_split_rule not in SENTENCE_RULES:
            raise ValueError(f"unknown sentence_split_rule {self.sentence_split_rule!r}")
        if self.token_rule not in TOKEN_RULES:
            raise ValueError(f"unknown token_rule {self.token_rule!r}")


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    handbook_id: str
    heading: str
    text: str
    token_count: int
    pages: tuple[int, ...]
    section_index: int = 0
    body_start: int = 0
    body_end: int = 0
    hard_wrapped: bool = False

    def to_json(self) -> dict:
        d = asdict(self)
        d["pages"] = list(self.pages)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Chunk":
        return cls(**{**d, "pages": tuple(d["pages"])})


def chunk_handbook_id(chunk_id: str) -> str:
    return chunk_id.rpartition("#")[0]


def heading_prefix(heading: str) -> str:
    return f"{heading}: " if heading.strip() else ""


def _hard_wrap(body: str, start: int, end: int, max_tokens: int) -> list[tuple[int, int]]:
    starts = [start + s for s in token_starts(body[start:end])]
    cuts = [start] + starts[max_tokens::max_tokens] + [end]
    return [(a, b) for a, b in zip(cuts, cuts[1:])]


def _section_units(body: str, cfg: ChunkingConfig,
                   counter: Callable[[str], int]) -> list[tuple[int, int, int, bool]]:
    """Split a body into ``(start, end, tokens, wrapped)`` units no larger than the budget."""
    units = []
    for a, b in SENTENCE_RULES[cfg.sentence_split_rule](body):
        n = counter(body[a:b])
        if n <= cfg.max_tokens:
            units.append((a, b, n, False))
            continue
        logger.warning("sentence of %d tokens exceeds max_tokens=%d; hard-wrapping", n, cfg.max_tokens)
        for wa, wb in _hard_wrap(body, a, b, cfg.max_tokens):
            units.append((wa, wb, counter(body[wa:wb]), True))
    return units


def chunk_handbook(h: Handbook, cfg: ChunkingConfig | None = None) -> list[Chunk]:
    """Chunk a handbook section by section.

    Sections within budget become one chunk. Larger sections are packed
    greedily from sentences; every sub-chunk carries the section heading as
    a ``"<heading>: "`` prefix. The budget applies to body tokens only.
    """
    cfg = cfg or ChunkingConfig()
    counter = TOKEN_RULES[cfg.token_rule]
    chunks: list[Chunk] = []

    def emit(idx: int, heading: str, body: str, pages, a: int, b: int, n: int, wrapped: bool) -> None:
        chunks.append(Chunk(
            chunk_id=f"{h.id}#{len(chunks):04d}",
            handbook_id=h.id,
            heading=heading,
            text=heading_prefix(heading) + body[a:b].strip(),
            token_count=n,
            pages=tuple(pages),
            section_index=idx,
            body_start=a,
            body_end=b,
            hard_wrapped=wrapped,
        ))

    for idx, sec in enumerate(h.sections):
        body = sec.body
        total = counter(body)
        if total <= cfg.max_tokens:
            emit(idx, sec.heading, body, sec.pages, 0, len(body), total, False)
            continue
        units = _section_units(body, cfg, counter)
        # leading whitespace before the first unit belongs to the first chunk
        cur_start, cur_end, cur_n, cur_wrapped = 0, 0, 0, False
        for a, b, n, wrapped in units:
            if cur_n and cur_n + n > cfg.max_tokens:
                emit(idx, sec.heading, body, sec.pages, cur_start, cur_end, cur_n, cur_wrapped)
                cur_start, cur_n, cur_wrapped = a, 0, False
            cur_end = b
            cur_n += n
            cur_wrapped = cur_wrapped or wrapped
        emit(idx, sec.heading, body, sec.pages, cur_start, len(body), cur_n, cur_wrapped)
    return chunks


def dump_chunks_jsonl(chunks: list[Chunk]) -> str:
    """Debug dump: one chunk JSON object per line."""
    return "".join(json.dumps(c.to_json(), sort_keys=True, ensure_ascii=False) + "\n" for c in chunks)
