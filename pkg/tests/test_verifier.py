"""Verifier prompt construction and verdict parsing/retry behavior."""

from __future__ import annotations

import pytest

from helpers import make_candidate, make_task
from steppref.gateway import MockChatBackend, ModelGateway
from steppref.records import Action, Candidate, HistoryStep, Observation, StepContext
from steppref.verifier import (
    AllCandidatesInvalid,
    StepVerificationFailed,
    build_prompt,
    select_best,
)


def _parse_error_candidate(raw: str = "garbled reply") -> Candidate:
    return Candidate(
        action=Action(thought="", code="", raw=raw),
        observation=Observation(
            status="parse_error",
            error_kind="parse_error",
            error_message="missing code block",
        ),
    )


def _ctx(history=()) -> StepContext:
    return StepContext(query="What is shown?", file_summaries=("a bar chart",), history=tuple(history))


def _gw(*verifier_replies: str) -> ModelGateway:
    backend = MockChatBackend(queues={"verifier": list(verifier_replies)})
    return ModelGateway({"verifier": backend}, sleep=lambda s: None)


def test_prompt_lists_all_step_sets_in_order():
    cands = [make_candidate(f"c{i}") for i in range(5)]
    messages = build_prompt(make_task(), _ctx(), cands)
    system, user = messages[0][1], messages[1][1]
    assert "rank 5" in system
    assert "one of 1, 2, 3, 4, and 5" in system
    for i in range(1, 6):
        assert f"Step Set {i}:" in user
    assert user.index("Step Set 1:") < user.index("Step Set 5:")


def test_first_step_previous_result_is_none():
    messages = build_prompt(make_task(), _ctx(), [make_candidate("a"), make_candidate("b")])
    assert "PREVIOUS_RESULT: none" in messages[1][1]
    hist = [HistoryStep(thought="t", code="c()", output="seen 7 items")]
    messages = build_prompt(make_task(), _ctx(hist), [make_candidate("a"), make_candidate("b")])
    assert "PREVIOUS_RESULT: seen 7 items" in messages[1][1]


def test_all_parse_error_candidates_rejected():
    with pytest.raises(AllCandidatesInvalid):
        build_prompt(make_task(), _ctx(), [_parse_error_candidate(), _parse_error_candidate("x")])


def test_parse_error_candidate_rendered_with_diagnostic():
    cands = [make_candidate("fine"), _parse_error_candidate("Thought only, no code")]
    user = build_prompt(make_task(), _ctx(), cands)[1][1]
    assert "Thought only, no code" in user
    assert "[parse_error:parse_error] missing code block" in user


def test_prompts_differ_for_different_candidates():
    a = build_prompt(make_task(), _ctx(), [make_candidate("x"), make_candidate("y")])
    b = build_prompt(make_task(), _ctx(), [make_candidate("x"), make_candidate("z")])
    assert a != b


def test_select_best_happy_path():
    cands = [make_candidate(f"c{i}") for i in range(5)]
    verdict = select_best(_gw('{"reason":"correct tool","best_id":2}'), make_task(), _ctx(), cands)
    assert verdict.best_id == 2
    assert verdict.reason == "correct tool"


def test_select_best_corrects_out_of_range_then_succeeds():
    cands = [make_candidate(f"c{i}") for i in range(5)]
    gw = _gw('{"reason":"r","best_id":7}', '{"reason":"r","best_id":3}')
    verdict = select_best(gw, make_task(), _ctx(), cands)
    assert verdict.best_id == 3
    assert gw.calls_for_role("verifier") == 2


def test_select_best_never_accepts_parse_error_candidate():
    cands = [make_candidate("ok"), _parse_error_candidate()]
    gw = _gw('{"reason":"r","best_id":2}', '{"reason":"r","best_id":1}')
    verdict = select_best(gw, make_task(), _ctx(), cands)
    assert verdict.best_id == 1


def test_select_best_gives_up_after_three_bad_replies():
    cands = [make_candidate("a"), make_candidate("b")]
    gw = _gw("not json", "still not json", "nope")
    with pytest.raises(StepVerificationFailed):
        select_best(gw, make_task(), _ctx(), cands)


def test_verdict_json_can_be_wrapped_in_prose():
    cands = [make_candidate("a"), make_candidate("b")]
    reply = 'Sure! Here is my verdict:\n{"reason":"better query","best_id":1}\nHope that helps.'
    verdict = select_best(_gw(reply), make_task(), _ctx(), cands)
    assert verdict.best_id == 1
