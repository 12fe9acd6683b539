"""Builds the step-verification prompt and parses the verdict.

The verifier model receives every candidate step with its execution
result and must name the single best candidate as a JSON verdict
{"reason": ..., "best_id": ...}. Malformed or out-of-range verdicts get
a corrective follow-up message; after three failed attempts the step is
given up.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .gateway import ChatRequest, ModelGateway, Sampling
from .jsontext import extract_json_object
from .prompts import id_list_text, render_template
from .records import Candidate, StepContext, Task
from .rendering import render_action, render_observation

__all__ = [
    "Verdict",
    "AllCandidatesInvalid",
    "StepVerificationFailed",
    "build_prompt",
    "select_best",
    "VERIFIER_ATTEMPTS",
]

VERIFIER_ATTEMPTS = 3


class AllCandidatesInvalid(RuntimeError):
    """Every sampled candidate failed to parse; there is nothing to rank."""


class StepVerificationFailed(RuntimeError):
    """The verifier kept returning unusable verdicts."""


@dataclass(frozen=True)
class Verdict:
    best_id: int
    reason: str
    raw: str


def _current_step_text(candidate: Candidate) -> str:
    if candidate.observation.status == "parse_error":
        return candidate.action.raw
    return render_action(candidate.action)


def _step_sets_text(context: StepContext, candidates: Sequence[Candidate]) -> str:
    previous = context.history[-1].output if context.history else "none"
    blocks = []
    for i, cand in enumerate(candidates, start=1):
        blocks.append(
            f"Step Set {i}:\n"
            f"PREVIOUS_RESULT: {previous}\n"
            f"CURRENT_STEP:\n{_current_step_text(cand)}\n"
            f"CURRENT_RESULT: {render_observation(cand.observation)}"
        )
    return "\n\n".join(blocks)


def _task_text(task: Task, context: StepContext) -> str:
    if not context.file_summaries:
        return task.query
    lines = "\n".join(f"- {s}" for s in context.file_summaries)
    return f"{task.query}\nFiles:\n{lines}"


def build_prompt(
    task: Task, context: StepContext, candidates: Sequence[Candidate]
) -> tuple[tuple[str, str], ...]:
    """Messages asking the verifier to rank ``candidates`` for this step.

    Raises AllCandidatesInvalid when no candidate parsed, since a verdict
    could only ever name an unusable step.
    """
    if not candidates:
        raise AllCandidatesInvalid("no candidates to rank")
    if all(c.observation.status == "parse_error" for c in candidates):
        raise AllCandidatesInvalid("every candidate failed to parse")
    n = len(candidates)
    system = render_template("verifier_system", n=n, id_list=id_list_text(n))
    user = render_template(
        "verifier_user",
        task=_task_text(task, context),
        step_sets=_step_sets_text(context, candidates),
    )
    return (("system", system), ("user", user))


def _parse_verdict(text: str, candidates: Sequence[Candidate]) -> Verdict | None:
    obj = extract_json_object(text)
    if obj is None:
        return None
    best_id = obj.get("best_id")
    reason = obj.get("reason")
    if isinstance(best_id, bool) or not isinstance(best_id, int):
        return None
    if not isinstance(reason, str) or not reason.strip():
        return None
    if not 1 <= best_id <= len(candidates):
        return None
    if candidates[best_id - 1].observation.status == "parse_error":
        return None
    return Verdict(best_id=best_id, reason=reason, raw=text)


def select_best(
    gateway: ModelGateway,
    task: Task,
    context: StepContext,
    candidates: Sequence[Candidate],
    attempts: int = VERIFIER_ATTEMPTS,
    max_tokens: int = 1024,
) -> Verdict:
    """Ask the verifier for the best candidate, retrying bad verdicts.

    Each retry appends the previous reply plus a corrective user message,
    so the model sees what it got wrong.
    """
    messages = list(build_prompt(task, context, candidates))
    valid_ids = [
        str(i)
        for i, c in enumerate(candidates, start=1)
        if c.observation.status != "parse_error"
    ]
    for _ in range(attempts):
        request = ChatRequest(
            role_tag="verifier",
            messages=tuple(messages),
            sampling=Sampling(temperature=0.0, max_tokens=max_tokens),
        )
        reply = gateway.with_retry(request)
        text = reply.texts[0]
        verdict = _parse_verdict(text, candidates)
        if verdict is not None:
            return verdict
        messages.append(("assistant", text))
        messages.append(
            (
                "user",
                "That reply was not a usable verdict. Answer again with only a json "
                'object {"reason": "...", "best_id": <int>} where best_id is one of: '
                + ", ".join(valid_ids)
                + ".",
            )
        )
    raise StepVerificationFailed(f"no usable verdict after {attempts} attempts")
