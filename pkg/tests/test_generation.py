from __future__ import annotations

import json

import pytest

from conftest import ScriptedChat, make_handbook, make_question, scripted_gateway
from handbook_divergence.chunking import chunk_handbook
from handbook_divergence.corpus import build_routing
from handbook_divergence.gateway import BackendError
from handbook_divergence.generation import (GroundedAnswer, answer_path, clean_model_text, detect_absence,
                                            generate_answer, has_sentinel, load_answer, run_generation)


def classifier(verdict: str):
    """Chat function: fixed generation reply, fixed classifier verdict."""

    def chat(system, user):
        return verdict if "<answer>" in user else "Take tacrolimus twice daily."

    return chat


class TestSentinel:
    @pytest.mark.parametrize("text", ["NOT ADDRESSED", "  not addressed: the handbook is silent",
                                      "**NOT ADDRESSED** - no content", "Not Addressed."])
    def test_detected(self, text):
        assert has_sentinel(text)
        assert detect_absence(text, None) == (True, "sentinel_prefix")

    @pytest.mark.parametrize("text", ["The topic is NOT ADDRESSED here", "Notably, address the issue", ""])
    def test_not_detected(self, text):
        assert not has_sentinel(text)

    def test_classifier_no(self):
        chat = ScriptedChat(["NO"])
        assert detect_absence("Take tacrolimus twice daily.", scripted_gateway(chat)) == (False, "llm_classifier")
        assert len(chat.calls) == 1

    def test_classifier_yes(self):
        assert detect_absence("The handbook does not say.", scripted_gateway(ScriptedChat(["Yes."]))) == (
            True, "llm_classifier")

    def test_classifier_reask_then_unresolved(self):
        chat = ScriptedChat(["maybe", "hard to say"])
        assert detect_absence("Something.", scripted_gateway(chat)) == (None, "unresolved")
        assert len(chat.calls) == 2

    def test_classifier_reask_recovers(self):
        assert detect_absence("Something.", scripted_gateway(ScriptedChat(["hmm", "NO"]))) == (
            False, "llm_classifier")

    def test_think_blocks_stripped(self):
        assert clean_model_text("<think>reasoning</think>\nNOT ADDRESSED") == "NOT ADDRESSED"


class TestGenerateAnswer:
    def test_empty_context_short_circuits(self):
        chat = ScriptedChat()
        gw = scripted_gateway(chat)
        ans = generate_answer(make_question(), make_handbook(), [], gw)
        assert ans.is_absent is True and ans.absence_method == "empty_retrieval"
        assert chat.calls == [] and gw.stats.chat.calls == 0

    def test_sentinel_reply(self, tiny_handbook):
        chat = ScriptedChat(["NOT ADDRESSED: no relevant content"])
        ans = generate_answer(make_question(), tiny_handbook, chunk_handbook(tiny_handbook)[:2],
                              scripted_gateway(chat))
        assert ans.is_absent is True and ans.absence_method == "sentinel_prefix"
        assert len(chat.calls) == 1

    def test_substantive_reply_uses_classifier(self, tiny_handbook):
        context = chunk_handbook(tiny_handbook)[:2]
        ans = generate_answer(make_question(), tiny_handbook, context, scripted_gateway(classifier("NO")))
        assert ans.is_absent is False and ans.absence_method == "llm_classifier"
        assert ans.context_chunk_ids == [c.chunk_id for c in context]

    def test_prompt_carries_question_and_passages(self, tiny_handbook):
        chat = ScriptedChat(["NOT ADDRESSED"])
        generate_answer(make_question(text="Is grapefruit ok?"), tiny_handbook,
                        chunk_handbook(tiny_handbook)[:1], scripted_gateway(chat))
        user = chat.calls[0][1]
        assert "<question>Is grapefruit ok?</question>" in user
        assert '<passage id="1">Diet: Avoid grapefruit' in user

    def test_foreign_context_rejected(self):
        with pytest.raises(ValueError):
            GroundedAnswer("q", "kidney-center-001-pre", "x", ["kidney-center-002-pre#0000"], False,
                           "llm_classifier", "fp")

    def test_sentinel_must_be_absent(self):
        with pytest.raises(ValueError):
            GroundedAnswer("q", "kidney-center-001-pre", "NOT ADDRESSED", [], False, "llm_classifier", "fp")


def six_pair_plan():
    hbs = [make_handbook("kidney", f"center-00{i}", "post") for i in range(1, 4)]
    qs = [make_question("q1", "Grapefruit?"), make_question("q2", "Exercise?")]
    return build_routing(qs, hbs), {q.id: q for q in qs}, {h.id: h for h in hbs}


class TestRunGeneration:
    def retrieve(self, hbs):
        return lambda q, hid: chunk_handbook(hbs[hid])[:1]

    def test_empty_plan(self, tmp_path):
        plan = build_routing([], [])
        ledger = run_generation(plan, {}, lambda q, h: [], scripted_gateway(), tmp_path)
        assert ledger.total == 0

    def test_failure_then_resume(self, tmp_path):
        plan, qs, hbs = six_pair_plan()
        assert len(plan) == 6
        fail_on = {"n": 0}

        def chat(system, user):
            if "<answer>" in user:
                return "NO"
            fail_on["n"] += 1
            if fail_on["n"] == 3:
                raise BackendError("boom")
            return "An answer."

        gw = scripted_gateway(chat, max_attempts=1)
        ledger = run_generation(plan, qs, self.retrieve(hbs), gw, tmp_path, config_hash="h")
        assert ledger.generated == 5 and len(ledger.failed) == 1
        failed_pair = ledger.failed[0]
        assert not answer_path(tmp_path, *failed_pair).exists()

        chat2 = ScriptedChat(fn=classifier("NO"))
        ledger2 = run_generation(plan, qs, self.retrieve(hbs), scripted_gateway(chat2), tmp_path, config_hash="h")
        assert ledger2.generated == 1 and ledger2.skipped == 5 and not ledger2.failed
        assert load_answer(tmp_path, *failed_pair).is_absent is False

        chat3 = ScriptedChat(fn=classifier("NO"))
        gw3 = scripted_gateway(chat3)
        ledger3 = run_generation(plan, qs, self.retrieve(hbs), gw3, tmp_path, config_hash="h", workers=3)
        assert ledger3.skipped == len(plan) and chat3.calls == [] and gw3.stats.total_calls() == 0

    def test_new_config_hash_regenerates(self, tmp_path):
        plan, qs, hbs = six_pair_plan()
        run_generation(plan, qs, self.retrieve(hbs), scripted_gateway(classifier("NO")), tmp_path, config_hash="a")
        ledger = run_generation(plan, qs, self.retrieve(hbs), scripted_gateway(classifier("NO")), tmp_path,
                                config_hash="b")
        assert ledger.generated == 6

    def test_answer_file_has_no_timestamp(self, tmp_path):
        plan, qs, hbs = six_pair_plan()
        ts = tmp_path / "ts.jsonl"
        run_generation(plan, qs, self.retrieve(hbs), scripted_gateway(classifier("YES")), tmp_path / "a",
                       timestamps_path=ts)
        doc = json.loads(answer_path(tmp_path / "a", "q1", "kidney-center-001-post").read_text())
        assert "generated_at" not in doc and doc["is_absent"] is True
        assert len(ts.read_text().splitlines()) == 6

    def test_unresolved_counted(self, tmp_path):
        plan, qs, hbs = six_pair_plan()
        ledger = run_generation(plan, qs, self.retrieve(hbs), scripted_gateway(classifier("perhaps")), tmp_path)
        assert ledger.unresolved == 6
        assert load_answer(tmp_path, "q1", "kidney-center-002-post").is_absent is None
