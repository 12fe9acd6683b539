"""Online per-step search: sample n candidate actions, execute them all,
let the verifier pick one, extend the history, repeat.

Branching works by replay: every candidate at step i re-executes the chosen
codes of steps 1..i-1 from scratch in a fresh session, so no interpreter
state ever needs to be forked. Inference mode (infer_task) disables both
the sampling width and the verifier and just follows single greedy steps.
"""

from __future__ import annotations

import ast
import hashlib
import re
from dataclasses import dataclass
from typing import Optional, Sequence, Union

from .executor import ExecRequest, SandboxDown, to_observation
from .gateway import ChatRequest, ModelGateway, Sampling
from .prompts import render_template, tool_docs_text
from .records import (
    DEFAULT_OBSERVATION_CAP,
    Action,
    Candidate,
    HistoryStep,
    InvariantViolation,
    Observation,
    StepContext,
    StepRecord,
    Task,
    ToolRegistrySpec,
    Trajectory,
    truncate_text,
)
from .rendering import render_observation, render_step_context
from .verifier import AllCandidatesInvalid, StepVerificationFailed, select_best

__all__ = [
    "ExploreConfig",
    "ParseFailure",
    "TaskAborted",
    "parse_action",
    "build_step_context",
    "sample_step",
    "history_entry",
    "explore_task",
    "infer_task",
    "controller_system_prompt",
    "derive_seed",
    "extract_final_answer",
]

FINAL_ANSWER_SENTINEL = "final_answer("

_FENCE_RE = re.compile(r"```[\w+-]*[ \t]*\n(.*?)\n?[ \t]*```", re.DOTALL)


@dataclass(frozen=True)
class ExploreConfig:
    n_candidates: int = 5
    max_steps: int = 8
    timeout_s: float = 30.0
    temperature: float = 0.7
    max_tokens: int = 1024
    final_sentinel: str = FINAL_ANSWER_SENTINEL
    observation_cap: int = DEFAULT_OBSERVATION_CAP
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_candidates < 1:
            raise InvariantViolation("n_candidates must be >= 1")
        if self.max_steps < 1:
            raise InvariantViolation("max_steps must be >= 1")


@dataclass(frozen=True)
class ParseFailure:
    """A controller reply that did not yield a (thought, code) action."""

    raw: str
    diagnostic: str


class TaskAborted(RuntimeError):
    """Exploration stopped mid-task; the partial trajectory is attached."""

    def __init__(self, reason: str, trajectory: Trajectory) -> None:
        super().__init__(reason)
        self.reason = reason
        self.trajectory = trajectory


def parse_action(reply_text: str) -> Union[Action, ParseFailure]:
    """Split a controller reply into thought text and fenced code.

    The thought is everything after the first "Thought:" marker up to the
    code fence; the code is the first fenced block. Both are required.
    """
    fence = _FENCE_RE.search(reply_text)
    if fence is None:
        return ParseFailure(raw=reply_text, diagnostic="missing code block")
    code = fence.group(1).strip()
    if not code:
        return ParseFailure(raw=reply_text, diagnostic="empty code block")
    head = reply_text[: fence.start()]
    marker = head.find("Thought:")
    if marker == -1:
        return ParseFailure(raw=reply_text, diagnostic="missing thought")
    thought = head[marker + len("Thought:") :].strip()
    if not thought:
        return ParseFailure(raw=reply_text, diagnostic="missing thought")
    return Action(thought=thought, code=code, raw=reply_text)


def build_step_context(task: Task, history: Sequence[HistoryStep]) -> StepContext:
    return StepContext(
        query=task.query,
        file_summaries=tuple(
            f"{f.relative_path}: {f.content_description}" for f in task.files
        ),
        history=tuple(history),
    )


def controller_system_prompt(registry: ToolRegistrySpec) -> str:
    return render_template("controller_system", tool_docs=tool_docs_text(registry))


def derive_seed(base_seed: int, task_id: str, step_index: int) -> int:
    """Stable per-step sampling seed, independent of execution order."""
    digest = hashlib.sha256(f"{base_seed}:{task_id}:{step_index}".encode("utf-8")).hexdigest()
    return int(digest[:12], 16)


def extract_final_answer(code: str) -> Optional[str]:
    """The literal argument of the first final_answer(...) call, if any."""
    try:
        tree = ast.parse(code)
    except SyntaxError:
        return None
    for node in ast.walk(tree):
        if (
            isinstance(node, ast.Call)
            and isinstance(node.func, ast.Name)
            and node.func.id == "final_answer"
            and node.args
        ):
            arg = node.args[0]
            if isinstance(arg, ast.Constant):
                return str(arg.value)
    return None


def _parse_error_candidate(raw: str, diagnostic: str) -> Candidate:
    return Candidate(
        action=Action(thought="", code="", raw=raw),
        observation=Observation(
            status="parse_error",
            error_kind="parse_error",
            error_message=diagnostic,
        ),
    )


def sample_step(
    gateway: ModelGateway,
    executor,
    task: Task,
    context: StepContext,
    registry: ToolRegistrySpec,
    cfg: ExploreConfig,
    prefix_codes: Sequence[str] = (),
    step_index: int = 1,
    workspace: str = ".",
    n_override: Optional[int] = None,
    temperature_override: Optional[float] = None,
) -> list[Candidate]:
    """Draw n candidate actions for one step and execute each of them."""
    n = n_override if n_override is not None else cfg.n_candidates
    temperature = (
        temperature_override if temperature_override is not None else cfg.temperature
    )
    request = ChatRequest(
        role_tag="controller",
        messages=(
            ("system", controller_system_prompt(registry)),
            ("user", render_step_context(context)),
        ),
        sampling=Sampling(temperature=temperature, max_tokens=cfg.max_tokens, n_samples=n),
        seed=derive_seed(cfg.seed, task.id, step_index),
    )
    reply = gateway.with_retry(request)
    fixtures = {name: spec.fixture for name, spec in registry.tools.items()}
    candidates: list[Candidate] = []
    for j, text in enumerate(reply.texts, start=1):
        parsed = parse_action(text)
        if isinstance(parsed, ParseFailure):
            candidates.append(_parse_error_candidate(parsed.raw, parsed.diagnostic))
            continue
        response = executor.exec(
            ExecRequest(
                request_id=f"{task.id}-s{step_index}-c{j}",
                profile="agent",
                prefix_codes=tuple(prefix_codes),
                candidate_code=parsed.code,
                tool_fixtures=fixtures,
                timeout_s=cfg.timeout_s,
                workspace=workspace,
            )
        )
        candidates.append(
            Candidate(action=parsed, observation=to_observation(response, cfg.observation_cap))
        )
    return candidates


def history_entry(candidate: Candidate, cap: int) -> HistoryStep:
    return HistoryStep(
        thought=candidate.action.thought,
        code=candidate.action.code,
        output=truncate_text(render_observation(candidate.observation), cap),
    )


def _final_answer_text(candidate: Candidate, code: str) -> str:
    obs = candidate.observation
    if obs.status == "ok" and obs.output:
        return obs.output
    literal = extract_final_answer(code)
    if literal is not None:
        return literal
    return render_observation(obs)


def explore_task(
    gateway: ModelGateway,
    executor,
    task: Task,
    registry: ToolRegistrySpec,
    cfg: ExploreConfig,
    workspace: str = ".",
) -> Trajectory:
    """Run the sample/verify loop until the final-answer sentinel or the
    step budget. Raises TaskAborted (partial trajectory attached) when a
    step cannot be completed."""
    if task.status != "accepted":
        raise InvariantViolation(f"cannot explore task with status {task.status!r}")
    if cfg.n_candidates < 2:
        raise InvariantViolation("exploration needs n_candidates >= 2")
    return _run_steps(gateway, executor, task, registry, cfg, workspace, explore=True)


def infer_task(
    gateway: ModelGateway,
    executor,
    task: Task,
    registry: ToolRegistrySpec,
    cfg: ExploreConfig,
    workspace: str = ".",
) -> Trajectory:
    """Greedy mode: one candidate per step, no verifier."""
    if task.status != "accepted":
        raise InvariantViolation(f"cannot run task with status {task.status!r}")
    return _run_steps(gateway, executor, task, registry, cfg, workspace, explore=False)


def _abort(task: Task, steps: list[StepRecord], reason: str) -> TaskAborted:
    trajectory = Trajectory(
        task_id=task.id,
        steps=tuple(steps),
        terminal=False,
        abort_reason=reason,
    )
    return TaskAborted(reason, trajectory)


def _run_steps(
    gateway: ModelGateway,
    executor,
    task: Task,
    registry: ToolRegistrySpec,
    cfg: ExploreConfig,
    workspace: str,
    explore: bool,
) -> Trajectory:
    steps: list[StepRecord] = []
    history: list[HistoryStep] = []
    prefix_codes: list[str] = []
    for index in range(1, cfg.max_steps + 1):
        context = build_step_context(task, history)
        try:
            candidates = sample_step(
                gateway,
                executor,
                task,
                context,
                registry,
                cfg,
                prefix_codes=prefix_codes,
                step_index=index,
                workspace=workspace,
                n_override=None if explore else 1,
                temperature_override=None if explore else 0.0,
            )
        except SandboxDown as exc:
            raise _abort(task, steps, f"sandbox down: {exc}") from exc
        if all(c.observation.status == "parse_error" for c in candidates):
            raise _abort(task, steps, "all candidates invalid")
        if explore:
            try:
                verdict = select_best(gateway, task, context, candidates)
            except (StepVerificationFailed, AllCandidatesInvalid) as exc:
                raise _abort(task, steps, f"step verification failed: {exc}") from exc
            chosen_id, reason = verdict.best_id, verdict.reason
        else:
            chosen_id, reason = 1, ""
        steps.append(
            StepRecord(
                index=index,
                candidates=tuple(candidates),
                chosen=chosen_id,
                verifier_reason=reason,
            )
        )
        chosen = candidates[chosen_id - 1]
        history.append(history_entry(chosen, cfg.observation_cap))
        prefix_codes.append(chosen.action.code)
        if cfg.final_sentinel in chosen.action.code:
            return Trajectory(
                task_id=task.id,
                steps=tuple(steps),
                terminal=True,
                final_answer=_final_answer_text(chosen, chosen.action.code),
            )
    return Trajectory(
        task_id=task.id,
        steps=tuple(steps),
        terminal=True,
        budget_exhausted=True,
    )
