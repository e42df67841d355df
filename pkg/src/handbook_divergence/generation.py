"""Grounded answer generation per (question, handbook) pair and absence detection."""

from __future__ import annotations

import json
import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Mapping, Sequence

from ._io import atomic_write_text, read_json, sha256_hex
from .chunking import Chunk, chunk_handbook_id
from .corpus import Handbook, Question, RoutingPlan
from .gateway import ChatRequest, Gateway, GatewayError, MalformedResponse
from .prompts import PromptTemplate, load_prompt

logger = logging.getLogger(__name__)

SENTINEL = "NOT ADDRESSED"
ABSENCE_METHODS = ("sentinel_prefix", "llm_classifier", "empty_retrieval", "unresolved")

_THINK_RE = re.compile(r"<think>.*?</think>", re.DOTALL | re.IGNORECASE)
_LEADING_NOISE_RE = re.compile(r"^[\W_]+")


class GenerationFailed(RuntimeError):
    pass


@dataclass
class GroundedAnswer:
    question_id: str
    handbook_id: str
    answer_text: str
    context_chunk_ids: list[str]
    is_absent: bool | None  # None when the absence classifier gave no usable verdict
    absence_method: str
    model_fingerprint: str
    config_hash: str = ""
    generated_at: str = ""  # kept in a sidecar, not in the answer file

    def __post_init__(self) -> None:
        if self.absence_method not in ABSENCE_METHODS:
            raise ValueError(f"unknown absence_method {self.absence_method!r}")
        if has_sentinel(self.answer_text) and self.is_absent is not True:
            raise ValueError("answer starts with the sentinel but is not marked absent")
        foreign = [c for c in self.context_chunk_ids if chunk_handbook_id(c) != self.handbook_id]
        if foreign:
            raise ValueError(f"context chunks from another handbook: {foreign}")

    @property
    def resolved(self) -> bool:
        return self.is_absent is not None

    def to_json(self) -> dict:
        d = asdict(self)
        del d["generated_at"]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "GroundedAnswer":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def clean_model_text(text: str) -> str:
    return _THINK_RE.sub("", text).strip()


def has_sentinel(text: str) -> bool:
    """Case-insensitive sentinel prefix check, tolerant of leading whitespace/punctuation."""
    head = _LEADING_NOISE_RE.sub("", text)
    return re.sub(r"\s+", " ", head[: len(SENTINEL) + 8]).upper().startswith(SENTINEL)


def _parse_yes_no(text: str) -> bool | None:
    words = re.findall(r"[A-Za-z]+", clean_model_text(text))
    if not words:
        return None
    first = words[0].upper()
    return True if first == "YES" else False if first == "NO" else None


def detect_absence(answer_text: str, gateway: Gateway | None,
                   prompt: PromptTemplate | None = None) -> tuple[bool | None, str]:
    """Return ``(is_absent, method)``.

    The sentinel check needs no model call. Otherwise a YES/NO classifier
    decides; if it answers neither after one re-ask, ``(None, "unresolved")``.
    """
    if has_sentinel(answer_text):
        return True, "sentinel_prefix"
    if gateway is None:
        raise ValueError("gateway required when the answer lacks the sentinel prefix")
    prompt = prompt or load_prompt("absence")
    system, user = prompt.render(answer=answer_text)
    verdict = _parse_yes_no(gateway.chat(ChatRequest(system, user, max_output_tokens=8)))
    if verdict is None:
        retry_user = user + "\n\nReply with exactly one word: YES or NO."
        verdict = _parse_yes_no(gateway.chat(ChatRequest(system, retry_user, max_output_tokens=8)))
    if verdict is None:
        return None, "unresolved"
    return verdict, "llm_classifier"


def format_passages(context: Sequence[Chunk]) -> str:
    return "\n".join(f'<passage id="{i}">{c.text}</passage>' for i, c in enumerate(context, start=1))


def model_fingerprint(model_name: str, *prompts: PromptTemplate) -> str:
    return f"{model_name}@" + sha256_hex("".join(p.digest for p in prompts))[:16]


def generate_answer(q: Question, h: Handbook | str, context: Sequence[Chunk], gateway: Gateway, *,
                    prompt: PromptTemplate | None = None, absence_prompt: PromptTemplate | None = None,
                    config_hash: str = "") -> GroundedAnswer:
    """Answer ``q`` from ``context`` (retrieved from ``h``) and classify absence.

    Empty context short-circuits to an absent answer without any model call.
    Gateway failures raise :class:`GenerationFailed`.
    """
    hid = h.id if isinstance(h, Handbook) else h
    prompt = prompt or load_prompt("generate")
    absence_prompt = absence_prompt or load_prompt("absence")
    fp = model_fingerprint(gateway.models.chat_model, prompt, absence_prompt)
    now = datetime.now(timezone.utc).isoformat()
    ids = [c.chunk_id for c in context]
    if not context:
        return GroundedAnswer(q.id, hid, SENTINEL, [], True, "empty_retrieval", fp, config_hash, now)
    system, user = prompt.render(question=q.text, passages=format_passages(context))
    try:
        text = clean_model_text(gateway.chat(ChatRequest(system, user, max_output_tokens=512)))
        is_absent, method = detect_absence(text, gateway, absence_prompt)
    except (GatewayError, MalformedResponse) as exc:
        raise GenerationFailed(f"{q.id}/{hid}: {exc}") from exc
    return GroundedAnswer(q.id, hid, text, ids, is_absent, method, fp, config_hash, now)


def answer_path(answers_dir: Path, question_id: str, handbook_id: str) -> Path:
    return Path(answers_dir) / question_id / f"{handbook_id}.json"


def write_answer(answers_dir: Path, ans: GroundedAnswer) -> None:
    text = json.dumps(ans.to_json(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    atomic_write_text(answer_path(answers_dir, ans.question_id, ans.handbook_id), text)


def load_answer(answers_dir: Path, question_id: str, handbook_id: str) -> GroundedAnswer | None:
    path = answer_path(answers_dir, question_id, handbook_id)
    if not path.exists():
        return None
    return GroundedAnswer.from_json(read_json(path))


def load_answers(answers_dir: Path, plan: RoutingPlan) -> dict[tuple[str, str], GroundedAnswer]:
    out = {}
    for qid, hid in plan.pairs:
        ans = load_answer(answers_dir, qid, hid)
        if ans is not None:
            out[(qid, hid)] = ans
    return out


@dataclass
class GenerationLedger:
    generated: int = 0
    skipped: int = 0
    failed: list[tuple[str, str]] = field(default_factory=list)
    unresolved: int = 0
    empty_retrieval: int = 0

    @property
    def total(self) -> int:
        return self.generated + self.skipped + len(self.failed)

    def to_json(self) -> dict:
        return {"generated": self.generated, "skipped": self.skipped,
                "failed": [list(p) for p in sorted(self.failed)],
                "unresolved": self.unresolved, "empty_retrieval": self.empty_retrieval}


Retrieve = Callable[[Question, str], Sequence[Chunk]]


def run_generation(plan: RoutingPlan, questions: Mapping[str, Question], retrieve: Retrieve,
                   gateway: Gateway, answers_dir: Path, *, config_hash: str = "",
                   workers: int = 1, timestamps_path: Path | None = None,
                   prompt: PromptTemplate | None = None,
                   absence_prompt: PromptTemplate | None = None) -> GenerationLedger:
    """Generate one answer file per routed pair, skipping pairs already done under ``config_hash``.

    A failing pair is recorded in ``ledger.failed`` and never aborts the run.
    """
    prompt = prompt or load_prompt("generate")
    absence_prompt = absence_prompt or load_prompt("absence")
    ledger = GenerationLedger()
    lock = threading.Lock()

    def work(pair: tuple[str, str]) -> None:
        qid, hid = pair
        existing = answer_path(answers_dir, qid, hid)
        if existing.exists():
            try:
                if read_json(existing).get("config_hash") == config_hash:
                    with lock:
                        ledger.skipped += 1
                    return
            except (OSError, ValueError):
                pass  # unreadable file: regenerate
        q = questions[qid]
        try:
            context = list(retrieve(q, hid))
            ans = generate_answer(q, hid, context, gateway, prompt=prompt,
                                  absence_prompt=absence_prompt, config_hash=config_hash)
        except (GenerationFailed, GatewayError, MalformedResponse) as exc:
            logger.warning("generation failed for %s/%s: %s", qid, hid, exc)
            with lock:
                ledger.failed.append(pair)
            return
        write_answer(answers_dir, ans)
        with lock:
            ledger.generated += 1
            ledger.unresolved += ans.absence_method == "unresolved"
            ledger.empty_retrieval += ans.absence_method == "empty_retrieval"
            if timestamps_path is not None:
                timestamps_path.parent.mkdir(parents=True, exist_ok=True)
                with open(timestamps_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"question_id": qid, "handbook_id": hid,
                                         "generated_at": ans.generated_at}) + "\n")

    if workers <= 1:
        for pair in plan.pairs:
            work(pair)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, plan.pairs))
    ledger.failed.sort()
    return ledger
