from __future__ import annotations

import threading
from pathlib import Path

import pytest

from handbook_divergence.corpus import Handbook, Question, Section, handbook_id
from handbook_divergence.gateway import Gateway, MockBackend, ModelConfig

GOLDEN_DIR = Path(__file__).resolve().parent / "golden"


def make_handbook(organ: str = "kidney", center: str = "center-001", phase: str = "post",
                  sections: list[tuple[str, str]] | None = None) -> Handbook:
    sections = sections if sections is not None else [("Diet", "Avoid grapefruit.")]
    secs = tuple(Section(h, b, (i + 1,)) for i, (h, b) in enumerate(sections))
    return Handbook(
        id=handbook_id(organ, center, phase),
        organ=organ,
        center_id=center,
        phase=phase,
        source_path=f"{organ}-{center}-{phase}.pdf",
        full_text="\n\n".join(f"{h}\n{b}" for h, b in sections),
        sections=secs,
    )


def make_question(qid: str = "q1", text: str = "Can I eat grapefruit?", organ: str = "general",
                  topics: tuple[str, ...] = ("Medications",)) -> Question:
    return Question(qid, text, organ, frozenset(topics))


class ScriptedChat:
    """Chat callable that replays canned replies (or a function) and records every prompt."""

    def __init__(self, replies=None, fn=None) -> None:
        self.replies = list(replies or [])
        self.fn = fn
        self.calls: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def __call__(self, system: str, user: str) -> str:
        with self._lock:
            self.calls.append((system, user))
            if self.replies:
                reply = self.replies.pop(0)
            else:
                reply = self.fn(system, user) if self.fn else ""
        if isinstance(reply, Exception):
            raise reply
        return reply


def scripted_gateway(chat=None, **kwargs) -> Gateway:
    backend = MockBackend(chat_fn=chat)
    kwargs.setdefault("sleep", lambda s: None)
    return Gateway(backend, ModelConfig(), **kwargs)


@pytest.fixture
def tiny_handbook() -> Handbook:
    return make_handbook(sections=[
        ("Diet", "Avoid grapefruit while taking tacrolimus. Eat plenty of vegetables."),
        ("Exercise", "Walk every day. Do not lift heavy objects for 6 weeks."),
        ("Clinic", "Bring your medication list to every visit."),
    ])


# -- acceptance summary ----------------------------------------------------------

_ACCEPTANCE: list[tuple[str, str, str, float]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if item.module.__name__ != "test_acceptance":
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
        _ACCEPTANCE.append((item.name, doc, "PASS" if rep.passed else "FAIL", rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, doc, verdict, duration in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"{verdict}  {name}: {doc} ({duration:.2f}s)")
