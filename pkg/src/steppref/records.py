"""Shared record types for the step-wise preference pipeline.

Every value that flows between pipeline stages (tasks, actions, observations,
trajectories, preference pairs) is an immutable dataclass with a canonical
JSON form: sorted keys, UTF-8, no whitespace. Identical records therefore
always serialize to identical bytes, which keeps dataset files diffable and
makes content digests meaningful.
"""

from __future__ import annotations

import dataclasses
import json
import posixpath
import typing
from dataclasses import dataclass, field
from typing import Any, Optional, Union

__all__ = [
    "DEFAULT_OBSERVATION_CAP",
    "TRUNCATION_MARKER",
    "TASK_STATUSES",
    "TASK_TRANSITIONS",
    "FILE_KINDS",
    "FILE_ORIGINS",
    "OBSERVATION_STATUSES",
    "FAILURE_STATUSES",
    "InvariantViolation",
    "FileArtifact",
    "Task",
    "Action",
    "Observation",
    "Candidate",
    "StepRecord",
    "Trajectory",
    "HistoryStep",
    "StepContext",
    "PreferencePair",
    "ToolSpec",
    "ToolRegistrySpec",
    "advance_status",
    "truncate_text",
    "validate",
    "serialize",
    "deserialize",
    "canonical_json",
    "write_ndjson",
    "append_ndjson",
    "read_ndjson",
]

DEFAULT_OBSERVATION_CAP = 2048
TRUNCATION_MARKER = "...[truncated]"

TASK_STATUSES = frozenset({"draft", "revised", "accepted", "rejected"})
# Rejection is allowed straight from draft: file planning or materialization
# can fail before a task ever reaches the revision stage.
TASK_TRANSITIONS = frozenset(
    {
        ("draft", "revised"),
        ("draft", "rejected"),
        ("revised", "accepted"),
        ("revised", "rejected"),
    }
)
FILE_KINDS = frozenset({"image", "pdf", "docx", "xlsx", "mp3", "other"})
FILE_ORIGINS = frozenset({"retrieved", "code_generated", "fixture"})
OBSERVATION_STATUSES = frozenset({"ok", "error", "timeout", "parse_error"})
FAILURE_STATUSES = frozenset({"error", "timeout", "parse_error"})

_KIND_BY_EXTENSION = {
    ".png": "image",
    ".jpg": "image",
    ".jpeg": "image",
    ".gif": "image",
    ".bmp": "image",
    ".pdf": "pdf",
    ".docx": "docx",
    ".xlsx": "xlsx",
    ".mp3": "mp3",
}


class InvariantViolation(ValueError):
    """A record failed validation where a valid record was required."""


# ---------------------------------------------------------------------------
# Record types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FileArtifact:
    """A file attached to a task, referenced by path relative to its workspace."""

    relative_path: str
    kind: str
    content_description: str
    origin: str


@dataclass(frozen=True)
class Task:
    """One synthesized task: a natural-language query plus file artifacts."""

    id: str
    query: str
    files: tuple[FileArtifact, ...] = ()
    tool_hints: tuple[str, ...] = ()
    status: str = "draft"
    provenance: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Action:
    """One candidate step: free-text thought plus the code to execute.

    ``raw`` always keeps the unparsed model reply for audit, including for
    placeholder actions built from unparseable replies (empty thought/code).
    """

    thought: str
    code: str
    raw: str


@dataclass(frozen=True)
class Observation:
    """Structured result of executing (or failing to parse) an action."""

    status: str
    output: str = ""
    error_kind: Optional[str] = None
    error_message: Optional[str] = None
    duration_ms: int = 0


@dataclass(frozen=True)
class Candidate:
    """An action paired with the observation its execution produced."""

    action: Action
    observation: Observation


@dataclass(frozen=True)
class StepRecord:
    """All candidates sampled at one step, plus the verifier's selection.

    ``chosen`` is 1-based to match the verifier's id convention.
    """

    index: int
    candidates: tuple[Candidate, ...]
    chosen: int
    verifier_reason: str = ""


@dataclass(frozen=True)
class Trajectory:
    """The chosen path through one task: an ordered list of step records."""

    task_id: str
    steps: tuple[StepRecord, ...]
    terminal: bool
    final_answer: Optional[str] = None
    budget_exhausted: bool = False
    abort_reason: Optional[str] = None


@dataclass(frozen=True)
class HistoryStep:
    """One completed (thought, code, observation output) triple."""

    thought: str
    code: str
    output: str


@dataclass(frozen=True)
class StepContext:
    """Everything the controller sees when proposing step i: the query,
    file summaries, and the chosen history of steps 1..i-1."""

    query: str
    file_summaries: tuple[str, ...] = ()
    history: tuple[HistoryStep, ...] = ()


@dataclass(frozen=True)
class PreferencePair:
    """A step context with one preferred and one dispreferred action."""

    context: StepContext
    preferred: Action
    dispreferred: Action
    meta: dict[str, Any] = field(default_factory=dict)


_REQUIRED_PAIR_META = ("task_id", "step_index", "chosen_candidate", "rejected_candidate")


@dataclass(frozen=True)
class ToolSpec:
    """Registry entry for one tool.

    ``fixture`` holds canned responses keyed by normalized argument text,
    with an optional "*" default, or {"endpoint": url} for passthrough.
    """

    signature: str
    doc: str = ""
    fixture: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ToolRegistrySpec:
    """The fixed toolkit available to the agent."""

    tools: dict[str, ToolSpec] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def truncate_text(text: str, cap: int = DEFAULT_OBSERVATION_CAP) -> str:
    """Clamp text to at most ``cap`` characters, marking the cut."""
    if len(text) <= cap:
        return text
    if cap <= len(TRUNCATION_MARKER):
        return text[:cap]
    return text[: cap - len(TRUNCATION_MARKER)] + TRUNCATION_MARKER


def advance_status(task: Task, new_status: str) -> Task:
    """Return a copy of ``task`` moved to ``new_status``.

    Raises InvariantViolation for transitions outside
    draft -> revised -> {accepted, rejected} (draft -> rejected allowed).
    """
    if (task.status, new_status) not in TASK_TRANSITIONS:
        raise InvariantViolation(
            f"illegal task status transition {task.status!r} -> {new_status!r}"
        )
    return dataclasses.replace(task, status=new_status)


def _is_inside_workspace(relative_path: str) -> bool:
    if not relative_path or relative_path.startswith(("/", "\\")):
        return False
    normal = posixpath.normpath(relative_path)
    return not (normal == ".." or normal.startswith("../"))


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _validate_file(rec: FileArtifact, cap: int) -> list[str]:
    out = []
    if not _is_inside_workspace(rec.relative_path):
        out.append(f"file path escapes workspace: {rec.relative_path!r}")
    if rec.kind not in FILE_KINDS:
        out.append(f"unknown file kind {rec.kind!r}")
    if rec.origin not in FILE_ORIGINS:
        out.append(f"unknown file origin {rec.origin!r}")
    ext = posixpath.splitext(rec.relative_path)[1].lower()
    implied = _KIND_BY_EXTENSION.get(ext)
    if implied is not None and rec.kind in FILE_KINDS and rec.kind != implied:
        out.append(f"extension {ext!r} implies kind {implied!r}, not {rec.kind!r}")
    return out


def _validate_task(rec: Task, cap: int) -> list[str]:
    out = []
    if not rec.id:
        out.append("task id empty")
    if rec.status not in TASK_STATUSES:
        out.append(f"unknown task status {rec.status!r}")
    if rec.status == "accepted" and not rec.query.strip():
        out.append("accepted task has empty query")
    for f in rec.files:
        out.extend(_validate_file(f, cap))
    for hint in rec.tool_hints:
        if not hint:
            out.append("empty tool hint")
    return out


def _validate_action(rec: Action, cap: int) -> list[str]:
    out = []
    if not rec.thought.strip():
        out.append("action thought empty")
    if not rec.code.strip():
        out.append("action code empty")
    if not rec.raw:
        out.append("action raw reply missing")
    return out


def _validate_observation(rec: Observation, cap: int) -> list[str]:
    out = []
    if rec.status not in OBSERVATION_STATUSES:
        out.append(f"unknown observation status {rec.status!r}")
    if rec.status == "ok" and rec.error_kind is not None:
        out.append("ok observation carries error_kind")
    if rec.status in ("error", "timeout") and not rec.error_message:
        out.append(f"{rec.status} observation lacks error_message")
    if not isinstance(rec.duration_ms, int) or rec.duration_ms < 0:
        out.append("duration_ms negative or not an integer")
    if len(rec.output) > cap:
        out.append(f"observation output exceeds cap ({len(rec.output)} > {cap})")
    return out


def _validate_candidate(rec: Candidate, cap: int) -> list[str]:
    out = _validate_observation(rec.observation, cap)
    if rec.observation.status == "parse_error":
        # Placeholder action: only the raw reply is required.
        if not rec.action.raw:
            out.append("parse_error candidate lacks raw reply")
    else:
        out.extend(_validate_action(rec.action, cap))
    return out


def _validate_step(rec: StepRecord, cap: int) -> list[str]:
    out = []
    if rec.index < 1:
        out.append(f"step index {rec.index} not 1-based")
    if not rec.candidates:
        out.append("step has no candidates")
    if not 1 <= rec.chosen <= len(rec.candidates):
        out.append(f"chosen out of range: {rec.chosen} with {len(rec.candidates)} candidates")
    elif rec.candidates[rec.chosen - 1].observation.status == "parse_error":
        out.append("chosen candidate has parse_error status")
    for cand in rec.candidates:
        out.extend(_validate_candidate(cand, cap))
    return out


def _validate_trajectory(rec: Trajectory, cap: int, max_steps: Optional[int]) -> list[str]:
    out = []
    if not rec.task_id:
        out.append("trajectory task_id empty")
    for pos, step in enumerate(rec.steps, start=1):
        if step.index != pos:
            out.append(f"step indices must run 1..m, found {step.index} at position {pos}")
        out.extend(_validate_step(step, cap))
    if max_steps is not None and len(rec.steps) > max_steps:
        out.append(f"trajectory has {len(rec.steps)} steps, max is {max_steps}")
    if rec.terminal and rec.final_answer is None and not rec.budget_exhausted:
        out.append("terminal trajectory lacks final_answer and budget_exhausted flag")
    if rec.terminal and rec.abort_reason is not None:
        out.append("aborted trajectory cannot be terminal")
    return out


def _validate_context(rec: StepContext, cap: int) -> list[str]:
    out = []
    if not rec.query.strip():
        out.append("context query empty")
    for h in rec.history:
        if len(h.output) > cap:
            out.append(f"history output exceeds cap ({len(h.output)} > {cap})")
    return out


def _validate_pair(rec: PreferencePair, cap: int) -> list[str]:
    out = _validate_context(rec.context, cap)
    out.extend(_validate_action(rec.preferred, cap))
    dis = rec.dispreferred
    if not dis.raw:
        out.append("dispreferred raw reply missing")
    if bool(dis.thought.strip()) != bool(dis.code.strip()):
        out.append("dispreferred action half-formed (thought xor code empty)")
    if rec.preferred.raw == dis.raw:
        out.append("self-pair: preferred and dispreferred raw texts equal")
    for key in _REQUIRED_PAIR_META:
        if key not in rec.meta:
            out.append(f"pair meta missing {key!r}")
    return out


def _validate_registry(rec: ToolRegistrySpec, cap: int) -> list[str]:
    out = []
    for name, spec in rec.tools.items():
        if not name:
            out.append("empty tool name")
        if not spec.signature:
            out.append(f"tool {name!r} lacks a signature")
    return out


def validate(
    record: Any,
    *,
    observation_cap: int = DEFAULT_OBSERVATION_CAP,
    max_steps: Optional[int] = None,
) -> list[str]:
    """Return all invariant violations for ``record`` (empty list if valid).

    Violations are data, not failures; callers decide whether to raise.
    Types without registered invariants validate as clean.
    """
    if isinstance(record, Trajectory):
        return _validate_trajectory(record, observation_cap, max_steps)
    checkers = {
        FileArtifact: _validate_file,
        Task: _validate_task,
        Action: _validate_action,
        Observation: _validate_observation,
        Candidate: _validate_candidate,
        StepRecord: _validate_step,
        StepContext: _validate_context,
        PreferencePair: _validate_pair,
        ToolRegistrySpec: _validate_registry,
    }
    checker = checkers.get(type(record))
    if checker is None:
        return []
    return checker(record, observation_cap)


# ---------------------------------------------------------------------------
# Canonical serialization
# ---------------------------------------------------------------------------


def _encode(value: Any) -> Any:
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _encode(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (list, tuple)):
        return [_encode(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _encode(v) for k, v in value.items()}
    return value


def _decode(tp: Any, value: Any) -> Any:
    if tp is Any:
        return value
    origin = typing.get_origin(tp)
    if origin is Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _decode(args[0], value)
    if dataclasses.is_dataclass(tp):
        hints = typing.get_type_hints(tp)
        kwargs = {
            f.name: _decode(hints[f.name], value[f.name]) for f in dataclasses.fields(tp)
        }
        return tp(**kwargs)
    if origin is tuple:
        elem = typing.get_args(tp)[0]
        return tuple(_decode(elem, v) for v in value)
    if origin is dict:
        value_tp = typing.get_args(tp)[1]
        return {k: _decode(value_tp, v) for k, v in value.items()}
    return value


def canonical_json(value: Any) -> str:
    """Canonical JSON text for any JSON-compatible value or record."""
    return json.dumps(_encode(value), sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def serialize(record: Any, **validate_kwargs: Any) -> bytes:
    """Validate ``record`` and return its canonical UTF-8 JSON bytes.

    Raises InvariantViolation listing every failed invariant.
    """
    violations = validate(record, **validate_kwargs)
    if violations:
        raise InvariantViolation("; ".join(violations))
    return canonical_json(record).encode("utf-8")


def deserialize(cls: type, data: Union[bytes, str]) -> Any:
    """Rebuild a record of type ``cls`` from its canonical JSON form."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return _decode(cls, json.loads(data))


# ---------------------------------------------------------------------------
# Newline-delimited record files
# ---------------------------------------------------------------------------


def write_ndjson(path: Any, records: "typing.Iterable[Any]") -> int:
    """Write records to ``path``, one canonical JSON line each. Returns count."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(serialize(rec).decode("utf-8") + "\n")
            n += 1
    return n


def append_ndjson(path: Any, records: "typing.Iterable[Any]") -> int:
    """Append records to ``path`` as canonical JSON lines. Returns count."""
    n = 0
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(serialize(rec).decode("utf-8") + "\n")
            n += 1
    return n


def read_ndjson(cls: type, path: Any) -> list:
    """Read every record of type ``cls`` from a newline-delimited file."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(deserialize(cls, line))
    return out
