"""Handbook and question data model, loaders, and question-to-handbook routing."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

ORGANS = ("heart", "kidney", "liver", "lung", "pancreas")
QUESTION_ORGANS = ORGANS + ("general",)
PHASES = ("pre", "post", "combined")

# Default topic allow-list. Override via ``load_questions(topics=...)``.
DEFAULT_TOPICS = (
    "Medical Complications",
    "Reproductive Health",
    "Lifestyle & Daily Living",
    "Pre-Transplant",
    "Medications",
    "Monitoring & Follow-up",
    "Mental & Emotional Health",
    "Surgery & Recovery",
    "Special Populations & Education",
    "Transplant Process & Logistics",
    "Financial & Administrative",
    "Community & Peer Support",
    "Other",
)

_CENTER_RE = re.compile(r"^center-\d{3}$")


class CorpusError(Exception):
    """Corpus-level inconsistency (e.g. duplicate handbook ids)."""


class ValidationError(ValueError):
    """A single input file failed schema validation."""

    def __init__(self, source: str, field_path: str, message: str) -> None:
        self.source = source
        self.field_path = field_path
        self.message = message
        super().__init__(f"{source}: {field_path}: {message}")


@dataclass(frozen=True)
class Section:
    heading: str
    body: str
    pages: tuple[int, ...] = ()


@dataclass(frozen=True)
class Handbook:
    id: str
    organ: str
    center_id: str
    phase: str
    source_path: str
    full_text: str
    sections: tuple[Section, ...]


@dataclass(frozen=True)
class Question:
    id: str
    text: str
    organ: str
    topics: frozenset[str]
    subtopics: frozenset[str] = frozenset()


def handbook_id(organ: str, center_id: str, phase: str) -> str:
    return f"{organ}-{center_id}-{phase}"


def parse_handbook_id(hid: str) -> tuple[str, str, str]:
    """Split ``<organ>-<center_id>-<phase>`` back into its parts."""
    organ, sep, rest = hid.partition("-")
    center, sep2, phase = rest.rpartition("-")
    if not sep or not sep2 or organ not in ORGANS or phase not in PHASES or not center:
        raise ValueError(f"malformed handbook id: {hid!r}")
    return organ, center, phase


def center_of(hid: str) -> str:
    return parse_handbook_id(hid)[1]


def load_center_map(path: Path | str) -> dict[str, str]:
    """Load a JSON object mapping real center names to anonymized ``center-NNN`` ids."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValidationError(str(path), "$", "center map must be a JSON object")
    for name, anon in data.items():
        if not isinstance(anon, str) or not _CENTER_RE.match(anon):
            raise ValidationError(str(path), name, f"expected center-NNN, got {anon!r}")
    return dict(data)


# -- validation helpers ------------------------------------------------------

def _require(obj: Mapping, key: str, typ: type | tuple[type, ...], src: str, prefix: str = ""):
    path = f"{prefix}{key}"
    if key not in obj:
        raise ValidationError(src, path, "missing required field")
    value = obj[key]
    if not isinstance(value, typ) or isinstance(value, bool) and typ is not bool:
        raise ValidationError(src, path, f"expected {getattr(typ, '__name__', typ)}")
    return value


def _parse_section(raw: object, idx: int, src: str) -> Section:
    prefix = f"sections[{idx}]."
    if not isinstance(raw, dict):
        raise ValidationError(src, f"sections[{idx}]", "expected object")
    heading = _require(raw, "heading", str, src, prefix)
    body = _require(raw, "body", str, src, prefix)
    pages = _require(raw, "pages", list, src, prefix)
    if not body.strip():
        raise ValidationError(src, prefix + "body", "must be non-empty")
    for j, p in enumerate(pages):
        if not isinstance(p, int) or isinstance(p, bool) or p < 1:
            raise ValidationError(src, f"{prefix}pages[{j}]", "expected positive integer")
    if list(pages) != sorted(pages):
        raise ValidationError(src, prefix + "pages", "must be sorted ascending")
    return Section(heading=heading, body=body, pages=tuple(pages))


def parse_handbook(data: object, source: str = "<memory>",
                   center_map: Mapping[str, str] | None = None) -> Handbook:
    if not isinstance(data, dict):
        raise ValidationError(source, "$", "expected JSON object")
    raw_id = _require(data, "id", str, source)
    organ = _require(data, "organ", str, source)
    center = _require(data, "center", str, source)
    phase = _require(data, "phase", str, source)
    source_path = _require(data, "source_path", str, source)
    full_text = _require(data, "full_text", str, source)
    raw_sections = _require(data, "sections", list, source)

    if organ not in ORGANS:
        raise ValidationError(source, "organ", f"unknown organ {organ!r}")
    if phase not in PHASES:
        raise ValidationError(source, "phase", f"unknown phase {phase!r}")
    center_id = (center_map or {}).get(center, center)
    if not center_id.strip():
        raise ValidationError(source, "center", "empty center")
    hid = handbook_id(organ, center_id, phase)
    if raw_id not in (hid, handbook_id(organ, center, phase)):
        raise ValidationError(source, "id", f"{raw_id!r} does not encode ({organ}, {center}, {phase})")

    sections = tuple(_parse_section(s, i, source) for i, s in enumerate(raw_sections))
    if full_text.strip() and not sections:
        raise ValidationError(source, "sections", "must be non-empty when full_text is non-empty")
    return Handbook(
        id=hid,
        organ=organ,
        center_id=center_id,
        phase=phase,
        source_path=source_path,
        full_text=full_text,
        sections=sections,
    )


def handbook_to_json(h: Handbook) -> dict:
    return {
        "id": h.id,
        "organ": h.organ,
        "center": h.center_id,
        "phase": h.phase,
        "source_path": h.source_path,
        "full_text": h.full_text,
        "sections": [
            {"heading": s.heading, "body": s.body, "pages": list(s.pages)} for s in h.sections
        ],
    }


def load_corpus(dir_path: Path | str, *, center_map: Mapping[str, str] | None = None,
                errors: list[ValidationError] | None = None) -> list[Handbook]:
    """Load every ``*.json`` handbook file in ``dir_path``.

    Files that fail validation are skipped; each failure is appended to
    ``errors`` when given, otherwise logged. Duplicate ids raise
    :class:`CorpusError`. The result is sorted by handbook id.
    """
    handbooks: dict[str, Handbook] = {}
    for path in sorted(Path(dir_path).glob("*.json")):
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
            hb = parse_handbook(data, str(path), center_map)
        except json.JSONDecodeError as exc:
            err = ValidationError(str(path), "$", f"invalid JSON: {exc}")
            _report(err, errors)
            continue
        except ValidationError as err:
            _report(err, errors)
            continue
        if hb.id in handbooks:
            raise CorpusError(f"duplicate handbook id {hb.id!r} ({path})")
        handbooks[hb.id] = hb
    return [handbooks[k] for k in sorted(handbooks)]


def _report(err: ValidationError, errors: list[ValidationError] | None) -> None:
    if errors is None:
        logger.warning("skipping invalid file: %s", err)
    else:
        errors.append(err)


def parse_question(raw: object, idx: int, source: str,
                   topics: Iterable[str] | None = DEFAULT_TOPICS) -> Question:
    prefix = f"[{idx}]."
    if not isinstance(raw, dict):
        raise ValidationError(source, f"[{idx}]", "expected object")
    qid = _require(raw, "id", str, source, prefix)
    text = _require(raw, "text", str, source, prefix)
    organ = _require(raw, "organ", str, source, prefix)
    raw_topics = _require(raw, "topics", list, source, prefix)
    raw_sub = raw.get("subtopics", [])
    if not qid:
        raise ValidationError(source, prefix + "id", "must be non-empty")
    if not text.strip():
        raise ValidationError(source, prefix + "text", "must be non-empty")
    if organ not in QUESTION_ORGANS:
        raise ValidationError(source, prefix + "organ", f"unknown organ {organ!r}")
    if not raw_topics:
        raise ValidationError(source, prefix + "topics", "must be non-empty")
    allowed = None if topics is None else set(topics)
    for j, t in enumerate(raw_topics):
        if not isinstance(t, str):
            raise ValidationError(source, f"{prefix}topics[{j}]", "expected string")
        if allowed is not None and t not in allowed:
            raise ValidationError(source, f"{prefix}topics[{j}]", f"topic {t!r} not in allow-list")
    if not isinstance(raw_sub, list) or not all(isinstance(s, str) for s in raw_sub):
        raise ValidationError(source, prefix + "subtopics", "expected list of strings")
    return Question(id=qid, text=text, organ=organ,
                    topics=frozenset(raw_topics), subtopics=frozenset(raw_sub))


def load_questions(path: Path | str, *, topics: Iterable[str] | None = DEFAULT_TOPICS) -> list[Question]:
    """Load and validate a JSON array of questions. Pass ``topics=None`` to skip the allow-list."""
    source = str(path)
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(source, "$", f"invalid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise ValidationError(source, "$", "expected JSON array")
    questions = [parse_question(raw, i, source, topics) for i, raw in enumerate(data)]
    dupes = [qid for qid, n in Counter(q.id for q in questions).items() if n > 1]
    if dupes:
        raise ValidationError(source, "id", f"duplicate question ids: {sorted(dupes)}")
    return questions


def question_to_json(q: Question) -> dict:
    return {
        "id": q.id,
        "text": q.text,
        "organ": q.organ,
        "topics": sorted(q.topics),
        "subtopics": sorted(q.subtopics),
    }


@dataclass
class RoutingPlan:
    """Which handbooks answer which question.

    ``pairs`` is ordered by question id, then handbook id. ``organ_counts``
    maps each question organ label (including ``general``) to its pair count.
    """

    pairs: list[tuple[str, str]]
    organ_counts: dict[str, int]
    by_question: dict[str, list[str]] = field(default_factory=dict)

    def handbooks_for(self, question_id: str) -> list[str]:
        """C(q): the handbooks queried for ``question_id``."""
        return self.by_question.get(question_id, [])

    def __len__(self) -> int:
        return len(self.pairs)


def build_routing(questions: Sequence[Question], handbooks: Sequence[Handbook]) -> RoutingPlan:
    all_ids = sorted(h.id for h in handbooks)
    by_organ: dict[str, list[str]] = {o: [] for o in ORGANS}
    for h in handbooks:
        by_organ[h.organ].append(h.id)
    for ids in by_organ.values():
        ids.sort()

    pairs: list[tuple[str, str]] = []
    counts: dict[str, int] = {o: 0 for o in QUESTION_ORGANS}
    by_question: dict[str, list[str]] = {}
    for q in sorted(questions, key=lambda q: q.id):
        targets = all_ids if q.organ == "general" else by_organ.get(q.organ, [])
        by_question[q.id] = list(targets)
        counts[q.organ] += len(targets)
        pairs.extend((q.id, hid) for hid in targets)
    return RoutingPlan(pairs=pairs, organ_counts=counts, by_question=by_question)
