"""Five-label pairwise judging of answers and per-question comparison matrices."""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from ._io import atomic_write_text, read_json, write_json
from .corpus import Question, RoutingPlan
from .gateway import ChatRequest, Gateway, GatewayError, MalformedResponse
from .generation import GroundedAnswer, load_answer
from .prompts import PromptTemplate, load_prompt

logger = logging.getLogger(__name__)


class Label(str, Enum):
    ABSENT = "Absent"
    CONSISTENT = "Consistent"
    COMPLEMENTARY = "Complementary"
    DIVERGENT = "Divergent"
    CONTRADICTORY = "Contradictory"

    @property
    def code(self) -> str:
        return LABEL_CODES[self]

    @classmethod
    def parse(cls, value: str) -> "Label":
        """Case-insensitive exact match on the five label names."""
        if isinstance(value, str):
            for label in cls:
                if value.strip().lower() == label.value.lower():
                    return label
        raise ValueError(f"unknown label {value!r}")

    @classmethod
    def from_code(cls, code: str) -> "Label":
        return _CODE_LABELS[code]


LABEL_CODES = {
    Label.ABSENT: "A",
    Label.CONSISTENT: "C",
    Label.COMPLEMENTARY: "P",
    Label.DIVERGENT: "D",
    Label.CONTRADICTORY: "X",
}
_CODE_LABELS = {v: k for k, v in LABEL_CODES.items()}

DIVERGENT_LABELS = frozenset({Label.DIVERGENT, Label.CONTRADICTORY})
SIGNIFICANCE_LEVELS = ("low", "medium", "high")
STATUSES = ("ok", "label_error", "unresolved")


class MatrixError(ValueError):
    pass


@dataclass
class PairwiseComparison:
    question_id: str
    handbook_a: str
    handbook_b: str
    label: Label | None
    justification: str = ""
    subtopic_tag: str | None = None
    significance: str | None = None
    judge_fingerprint: str = ""
    status: str = "ok"
    config_hash: str = ""
    error: str = ""

    def __post_init__(self) -> None:
        if self.handbook_a == self.handbook_b:
            raise ValueError("a comparison needs two distinct handbooks")
        if self.handbook_a > self.handbook_b:
            raise ValueError("handbook_a must sort before handbook_b")
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if isinstance(self.label, str) and not isinstance(self.label, Label):
            self.label = Label.parse(self.label)
        if self.status == "ok":
            if self.label is None:
                raise ValueError("ok comparisons need a label")
            if (self.significance is not None) != (self.label in DIVERGENT_LABELS):
                raise ValueError(f"significance/label mismatch for {self.label.value}")
            if self.significance is not None and self.significance not in SIGNIFICANCE_LEVELS:
                raise ValueError(f"bad significance {self.significance!r}")

    @property
    def usable(self) -> bool:
        return self.status == "ok"

    def to_json(self) -> dict:
        return {
            "question_id": self.question_id,
            "handbook_a": self.handbook_a,
            "handbook_b": self.handbook_b,
            "label": self.label.value if self.label else None,
            "justification": self.justification,
            "subtopic_tag": self.subtopic_tag,
            "significance": self.significance,
            "judge_fingerprint": self.judge_fingerprint,
            "status": self.status,
            "config_hash": self.config_hash,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PairwiseComparison":
        d = dict(d)
        d["label"] = Label.parse(d["label"]) if d.get("label") else None
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def judge_fingerprint(model_name: str, prompt: PromptTemplate) -> str:
    return f"{model_name}@{prompt.digest[:16]}"


def _parse_judgement(text: str) -> dict:
    data = json.loads(text)
    if not isinstance(data, dict):
        raise ValueError("judge reply is not a JSON object")
    return data


def _significance(data: dict) -> str | None:
    raw = data.get("significance")
    if isinstance(raw, str) and raw.strip().lower() in SIGNIFICANCE_LEVELS:
        return raw.strip().lower()
    return None


def judge_pair(q: Question, ans_a: GroundedAnswer, ans_b: GroundedAnswer, gateway: Gateway | None, *,
               prompt: PromptTemplate | None = None, config_hash: str = "") -> PairwiseComparison:
    """Classify the relationship between two answers to ``q``.

    Absent answers short-circuit without a judge call. Judge replies are
    checked for label/significance coherence: a significance on a
    non-divergent label is dropped; a missing one on a divergent label gets
    one repair request before the pair is marked ``label_error``.
    """
    if ans_a.question_id != q.id or ans_b.question_id != q.id:
        raise ValueError("both answers must belong to the question")
    if ans_a.handbook_id > ans_b.handbook_id:
        ans_a, ans_b = ans_b, ans_a
    prompt = prompt or load_prompt("judge")
    fp = judge_fingerprint(gateway.models.chat_model if gateway else "none", prompt)
    base = dict(question_id=q.id, handbook_a=ans_a.handbook_id, handbook_b=ans_b.handbook_id,
                judge_fingerprint=fp, config_hash=config_hash)

    if ans_a.is_absent is True or ans_b.is_absent is True:
        return PairwiseComparison(label=Label.ABSENT, **base)
    if not (ans_a.resolved and ans_b.resolved):
        return PairwiseComparison(label=None, status="unresolved",
                                  error="absence status unresolved for one side", **base)
    if gateway is None:
        raise ValueError("gateway required to judge non-absent pairs")

    system, user = prompt.render(question=q.text, answer_a=ans_a.answer_text, answer_b=ans_b.answer_text)
    try:
        data = _parse_judgement(gateway.chat(ChatRequest(system, user, response_format="json_object")))
        label = Label.parse(data.get("label"))
        significance = _significance(data)
        if label in DIVERGENT_LABELS and significance is None:
            repair = (user + f"\n\nYour previous reply labeled this pair {label.value} but did not give "
                      'a valid "significance" (low, medium, or high). Reply again with the complete JSON object.')
            data = _parse_judgement(gateway.chat(ChatRequest(system, repair, response_format="json_object")))
            label = Label.parse(data.get("label"))
            significance = _significance(data)
            if label in DIVERGENT_LABELS and significance is None:
                raise ValueError(f"{label.value} label without significance after repair")
    except (GatewayError, MalformedResponse, ValueError) as exc:
        logger.warning("judge error for %s %s/%s: %s", q.id, ans_a.handbook_id, ans_b.handbook_id, exc)
        return PairwiseComparison(label=None, status="label_error", error=str(exc), **base)

    if label is Label.ABSENT:
        logger.warning("judge returned Absent for a non-absent pair %s %s/%s",
                       q.id, ans_a.handbook_id, ans_b.handbook_id)
    if label not in DIVERGENT_LABELS:
        if data.get("significance") not in (None, ""):
            logger.warning("dropping significance on %s label for %s %s/%s", label.value, q.id,
                           ans_a.handbook_id, ans_b.handbook_id)
        significance = None
    tag = data.get("subtopic_tag")
    justification = data.get("justification") or ""
    return PairwiseComparison(
        label=label,
        justification=justification if isinstance(justification, str) else str(justification),
        subtopic_tag=tag if isinstance(tag, str) and tag.strip() else None,
        significance=significance,
        **base,
    )


# -- matrices ------------------------------------------------------------------

@dataclass
class ComparisonMatrix:
    question_id: str
    handbook_ids: tuple[str, ...]
    grid: list[list[Label]]
    excluded: list[tuple[str, str]] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.handbook_ids)

    def __getitem__(self, ij: tuple[int, int]) -> Label:
        i, j = ij
        return self.grid[i][j]

    def pairs(self) -> Iterable[tuple[str, str, Label]]:
        """Upper-triangle entries as ``(handbook_a, handbook_b, label)``."""
        for i, j in combinations(range(self.n), 2):
            yield self.handbook_ids[i], self.handbook_ids[j], self.grid[i][j]

    def check(self) -> None:
        for i in range(self.n):
            if self.grid[i][i] is not Label.CONSISTENT:
                raise MatrixError(f"diagonal [{i}][{i}] is not Consistent")
            for j in range(i + 1, self.n):
                if self.grid[i][j] is not self.grid[j][i]:
                    raise MatrixError(f"asymmetric at [{i}][{j}]")

    def to_json(self, config_hash: str = "") -> dict:
        return {
            "question_id": self.question_id,
            "handbooks": list(self.handbook_ids),
            "grid": ["".join(label.code for label in row) for row in self.grid],
            "excluded": [list(p) for p in self.excluded],
            "config_hash": config_hash,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ComparisonMatrix":
        m = cls(d["question_id"], tuple(d["handbooks"]),
                [[Label.from_code(ch) for ch in row] for row in d["grid"]],
                [tuple(p) for p in d.get("excluded", [])])
        m.check()
        return m


def build_matrix(question_id: str, comparisons: Sequence[PairwiseComparison],
                 handbook_ids: Sequence[str], *, strict: bool = False) -> ComparisonMatrix:
    """Assemble the symmetric N x N label grid (Consistent diagonal).

    Pairs with no usable comparison become Absent and are listed in
    ``excluded``; with ``strict`` a missing pair raises instead.
    """
    ids = tuple(sorted(handbook_ids))
    pos = {hid: i for i, hid in enumerate(ids)}
    labels: dict[tuple[str, str], Label] = {}
    for c in comparisons:
        if c.question_id != question_id:
            continue
        if c.handbook_a not in pos or c.handbook_b not in pos:
            raise MatrixError(f"comparison {c.handbook_a}/{c.handbook_b} outside the handbook set")
        if not c.usable:
            continue
        key = (c.handbook_a, c.handbook_b)
        if key in labels and labels[key] is not c.label:
            raise MatrixError(f"conflicting labels for {key}: {labels[key].value} vs {c.label.value}")
        labels[key] = c.label

    grid = [[Label.CONSISTENT if i == j else Label.ABSENT for j in range(len(ids))] for i in range(len(ids))]
    excluded = []
    for a, b in combinations(ids, 2):
        label = labels.get((a, b))
        if label is None:
            if strict:
                raise MatrixError(f"{question_id}: no usable comparison for {a}/{b}")
            excluded.append((a, b))
            label = Label.ABSENT
        grid[pos[a]][pos[b]] = grid[pos[b]][pos[a]] = label
    if excluded:
        logger.warning("%s: %d pair(s) without a usable comparison treated as Absent", question_id, len(excluded))
    return ComparisonMatrix(question_id, ids, grid, excluded)


def matrix_to_comparisons(matrix: ComparisonMatrix, **fields) -> list[PairwiseComparison]:
    """Inverse of :func:`build_matrix` for the label content of each pair."""
    out = []
    for a, b, label in matrix.pairs():
        if (a, b) in matrix.excluded:
            continue
        sig = "medium" if label in DIVERGENT_LABELS else None
        out.append(PairwiseComparison(matrix.question_id, a, b, label, significance=sig, **fields))
    return out


# -- persistence / batch -------------------------------------------------------

def comparison_path(comparisons_dir: Path, question_id: str, a: str, b: str) -> Path:
    return Path(comparisons_dir) / question_id / f"{a}__{b}.json"


def write_comparison(comparisons_dir: Path, c: PairwiseComparison) -> None:
    text = json.dumps(c.to_json(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    atomic_write_text(comparison_path(comparisons_dir, c.question_id, c.handbook_a, c.handbook_b), text)


def load_comparisons(comparisons_dir: Path, question_id: str | None = None) -> list[PairwiseComparison]:
    root = Path(comparisons_dir)
    pattern = f"{question_id}/*.json" if question_id else "*/*.json"
    return [PairwiseComparison.from_json(read_json(p)) for p in sorted(root.glob(pattern))]


@dataclass
class JudgingLedger:
    judged: int = 0
    short_circuited: int = 0
    skipped: int = 0
    errors: int = 0
    unresolved: int = 0
    missing_answers: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)


def run_judging(plan: RoutingPlan, questions: Mapping[str, Question], answers_dir: Path,
                comparisons_dir: Path, gateway: Gateway | None, *, config_hash: str = "",
                workers: int = 1, prompt: PromptTemplate | None = None) -> JudgingLedger:
    """Write one comparison file per unordered handbook pair per question.

    Existing files stamped with ``config_hash`` are skipped. Pairs whose
    answers are missing (failed generation) are counted, not judged.
    """
    prompt = prompt or load_prompt("judge")
    ledger = JudgingLedger()
    lock = threading.Lock()
    work_items: list[tuple[str, str, str]] = []
    for qid in sorted(plan.by_question):
        for a, b in combinations(sorted(plan.handbooks_for(qid)), 2):
            work_items.append((qid, a, b))

    def work(item: tuple[str, str, str]) -> None:
        qid, a, b = item
        path = comparison_path(comparisons_dir, qid, a, b)
        if path.exists():
            try:
                if read_json(path).get("config_hash") == config_hash:
                    with lock:
                        ledger.skipped += 1
                    return
            except (OSError, ValueError):
                pass
        ans_a = load_answer(answers_dir, qid, a)
        ans_b = load_answer(answers_dir, qid, b)
        if ans_a is None or ans_b is None:
            with lock:
                ledger.missing_answers += 1
            return
        short = ans_a.is_absent is True or ans_b.is_absent is True
        c = judge_pair(questions[qid], ans_a, ans_b, gateway, prompt=prompt, config_hash=config_hash)
        write_comparison(comparisons_dir, c)
        with lock:
            if short:
                ledger.short_circuited += 1
            elif c.status == "unresolved":
                ledger.unresolved += 1
            elif c.status == "label_error":
                ledger.errors += 1
            else:
                ledger.judged += 1

    if workers <= 1:
        for item in work_items:
            work(item)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, work_items))
    return ledger


def write_matrices(plan: RoutingPlan, comparisons_dir: Path, matrices_dir: Path, *,
                   config_hash: str = "", strict: bool = False) -> dict[str, ComparisonMatrix]:
    matrices = {}
    for qid in sorted(plan.by_question):
        m = build_matrix(qid, load_comparisons(comparisons_dir, qid), plan.handbooks_for(qid), strict=strict)
        write_json(Path(matrices_dir) / f"{qid}.json", m.to_json(config_hash))
        matrices[qid] = m
    return matrices
