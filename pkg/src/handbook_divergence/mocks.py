"""Deterministic stand-in for the chat model, used by ``--mock`` runs and tests.

It reads the same prompts the real model would and applies fixed rules:

* generation: pick the passage sentence sharing the most content words with
  the question (at least two), else reply with the sentinel;
* absence check: YES when the answer says the handbook "does not cover" or has
  "no information";
* judging: identical answers are Consistent; answers that both cite numbers
  but different ones are Divergent; answers with opposite negation and some
  shared vocabulary are Contradictory; high vocabulary overlap is
  Consistent; anything else is Complementary.
"""

from __future__ import annotations

import json
import re

from .chunking import split_sentences

STOPWORDS = frozenset("""
a an the and or but of to in on for with at by from into over under is are was were be been being
can could should would will shall may might must do does did done doing i me my mine you your yours
it its this that these those how what when where which who whom why after before while during have
has had get gets got any about there their they them we our us if as so than then also just very
not no yes transplant transplants
""".split())

NEGATIONS = frozenset({"not", "never", "cannot", "no", "avoid", "don't", "shouldn't", "mustn't"})

_WORD_RE = re.compile(r"[a-z0-9']+")
_HEADING_PREFIX_RE = re.compile(r"^[^.:!?\n]{1,80}: ")


def words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def content_words(text: str) -> set[str]:
    return {w for w in words(text) if w not in STOPWORDS and not w.isdigit()}


def _tag(text: str, tag: str) -> str:
    m = re.search(rf"<{tag}>(.*?)</{tag}>", text, re.DOTALL)
    return m.group(1).strip() if m else ""


def mock_generate(user: str) -> str:
    question = _tag(user, "question")
    qwords = content_words(question)
    best, best_score = None, 1
    for body in re.findall(r"<passage[^>]*>(.*?)</passage>", user, re.DOTALL):
        body = _HEADING_PREFIX_RE.sub("", body.strip(), count=1)
        for sent in split_sentences(body):
            score = len(qwords & content_words(sent))
            if score > best_score:
                best, best_score = sent, score
    return best if best is not None else "NOT ADDRESSED"


def mock_absence(user: str) -> str:
    answer = _tag(user, "answer").lower()
    return "YES" if "does not cover" in answer or "no information" in answer else "NO"


def jaccard(a: set[str], b: set[str]) -> float:
    return len(a & b) / len(a | b) if a | b else 1.0


def mock_judgement(answer_a: str, answer_b: str) -> dict:
    wa, wb = words(answer_a), words(answer_b)
    ca, cb = content_words(answer_a), content_words(answer_b)
    na, nb = set(re.findall(r"\d+", answer_a)), set(re.findall(r"\d+", answer_b))
    overlap = jaccard(ca, cb)
    neg_a, neg_b = bool(NEGATIONS & set(wa)), bool(NEGATIONS & set(wb))
    if wa == wb:
        return {"label": "Consistent", "justification": "Both answers give the same guidance.",
                "subtopic_tag": None, "significance": None}
    if na and nb and na != nb:
        return {"label": "Divergent",
                "justification": "Both answers give numeric guidance, but the numbers differ.",
                "subtopic_tag": "numeric thresholds", "significance": "medium"}
    if neg_a != neg_b and overlap >= 0.25:
        return {"label": "Contradictory",
                "justification": "One answer permits what the other rules out.",
                "subtopic_tag": "opposing guidance", "significance": "high"}
    if overlap >= 0.6:
        return {"label": "Consistent", "justification": "The answers make the same recommendation.",
                "subtopic_tag": None, "significance": None}
    return {"label": "Complementary",
            "justification": "The answers are compatible but cover different details.",
            "subtopic_tag": None, "significance": None}


def mock_chat(system: str, user: str) -> str:
    if "<answer_a>" in user:
        return json.dumps(mock_judgement(_tag(user, "answer_a"), _tag(user, "answer_b")), sort_keys=True)
    if "<answer>" in user:
        return mock_absence(user)
    if "<passages>" in user:
        return mock_generate(user)
    if "<passage>" in user:
        q, p = content_words(_tag(user, "question")), content_words(_tag(user, "passage"))
        return json.dumps({"score": len(q & p)})
    return ""
