"""Execution backends for candidate step code and file-generation code.

Two implementations of the same contract:

- StubExecutor: an in-process mini interpreter over a narrow code dialect
  (tool calls with literal arguments, assignments, print, final_answer,
  literal arithmetic). It is pure given the request plus its scripted
  table, which makes replay and byte-identical reruns trivial. The whole
  primary test suite runs against it.
- SocketExecutorClient: speaks newline-delimited JSON to the external
  sandbox service over a unix socket, one request per line.

Tool fixtures are keyed by normalized argument text; unknown argument
combinations produce a deterministic fixture-miss error so hallucinated
arguments surface instead of being silently absorbed.
"""

from __future__ import annotations

import ast
import json
import os
import socket
import time
from dataclasses import dataclass, field
from typing import Any, Optional

from .gateway import BackendUnavailable
from .records import (
    DEFAULT_OBSERVATION_CAP,
    InvariantViolation,
    Observation,
    truncate_text,
)

__all__ = [
    "EXEC_PROFILES",
    "ExecRequest",
    "ExecResponse",
    "SandboxDown",
    "normalize_call_args",
    "StubExecutor",
    "SocketExecutorClient",
    "to_observation",
]

EXEC_PROFILES = frozenset({"agent", "filegen"})
DEFAULT_HARD_TIMEOUT_CAP_S = 60.0
STUB_DURATION_MS = 3


class SandboxDown(BackendUnavailable):
    """The execution service cannot be reached."""


@dataclass(frozen=True)
class ExecRequest:
    """One isolated execution: replayed prefix codes, then the candidate."""

    request_id: str
    profile: str
    prefix_codes: tuple[str, ...]
    candidate_code: str
    tool_fixtures: dict[str, dict[str, Any]] = field(default_factory=dict)
    timeout_s: float = 30.0
    workspace: str = "."

    def __post_init__(self) -> None:
        if self.profile not in EXEC_PROFILES:
            raise InvariantViolation(f"unknown exec profile {self.profile!r}")
        if self.timeout_s <= 0:
            raise InvariantViolation("timeout_s must be positive")


@dataclass(frozen=True)
class ExecResponse:
    request_id: str
    status: str
    output: str = ""
    error_kind: Optional[str] = None
    error_message: Optional[str] = None
    duration_ms: int = 0


def to_observation(response: ExecResponse, cap: int = DEFAULT_OBSERVATION_CAP) -> Observation:
    """Convert an ExecResponse into an Observation, applying the output cap."""
    return Observation(
        status=response.status,
        output=truncate_text(response.output, cap),
        error_kind=response.error_kind,
        error_message=response.error_message,
        duration_ms=response.duration_ms,
    )


def normalize_call_args(args: list, kwargs: dict) -> str:
    """Canonical text for a call's arguments, used as the fixture key.

    Positional arguments keep their order; keyword arguments are sorted.
    """
    parts = [repr(a) for a in args]
    parts.extend(f"{k}={kwargs[k]!r}" for k in sorted(kwargs))
    return ", ".join(parts)


class _EvalError(Exception):
    def __init__(self, kind: str, message: str) -> None:
        super().__init__(message)
        self.kind = kind
        self.message = message


class StubExecutor:
    """Canned, deterministic executor used by the primary suite.

    ``scripted`` maps exact candidate code text to a full response dict:
    {"status", "output", "error_kind", "error_message", "duration_ms",
    "creates": [{"relative_path", "content"}]}. Code without a scripted
    entry is interpreted directly (see module docstring for the dialect).
    """

    def __init__(
        self,
        scripted: Optional[dict[str, dict[str, Any]]] = None,
        duration_ms: int = STUB_DURATION_MS,
    ) -> None:
        self.scripted = dict(scripted or {})
        self.duration_ms = duration_ms
        self._started = time.monotonic()
        self.exec_count = 0

    # -- public contract ----------------------------------------------------

    def exec(self, request: ExecRequest) -> ExecResponse:
        self.exec_count += 1
        env: dict[str, Any] = {}
        for pos, prefix in enumerate(request.prefix_codes, start=1):
            status, _, kind, message, _ = self._eval(prefix, request, env)
            if status != "ok":
                return ExecResponse(
                    request_id=request.request_id,
                    status="error",
                    error_kind="prefix_failure",
                    error_message=f"prefix code {pos} failed ({kind}): {message}",
                    duration_ms=self.duration_ms,
                )
        status, output, kind, message, duration = self._eval(
            request.candidate_code, request, env
        )
        return ExecResponse(
            request_id=request.request_id,
            status=status,
            output=output,
            error_kind=kind,
            error_message=message,
            duration_ms=duration,
        )

    def health(self) -> dict[str, Any]:
        return {
            "version": "stub-1",
            "uptime_s": time.monotonic() - self._started,
            "profiles": sorted(EXEC_PROFILES),
        }

    # -- interpretation -----------------------------------------------------

    def _eval(
        self, code: str, request: ExecRequest, env: dict[str, Any]
    ) -> tuple[str, str, Optional[str], Optional[str], int]:
        entry = self.scripted.get(code)
        if entry is not None:
            for spec in entry.get("creates", ()):
                target = os.path.join(request.workspace, spec["relative_path"])
                os.makedirs(os.path.dirname(target) or ".", exist_ok=True)
                with open(target, "w", encoding="utf-8") as fh:
                    fh.write(spec["content"])
            return (
                entry.get("status", "ok"),
                entry.get("output", ""),
                entry.get("error_kind"),
                entry.get("error_message"),
                entry.get(
                    "duration_ms",
                    int(request.timeout_s * 1000)
                    if entry.get("status") == "timeout"
                    else self.duration_ms,
                ),
            )
        if "while True" in code:
            return (
                "timeout",
                "",
                "timeout",
                f"execution exceeded {request.timeout_s}s",
                int(request.timeout_s * 1000),
            )
        try:
            tree = ast.parse(code)
        except SyntaxError as exc:
            return ("error", "", "syntax-error", str(exc), self.duration_ms)
        lines: list[str] = []
        try:
            for stmt in tree.body:
                self._exec_stmt(stmt, request, env, lines)
        except _EvalError as exc:
            return ("error", "", exc.kind, exc.message, self.duration_ms)
        return ("ok", "\n".join(lines), None, None, self.duration_ms)

    def _exec_stmt(self, stmt: ast.stmt, request: ExecRequest, env: dict, lines: list[str]) -> None:
        if isinstance(stmt, ast.Assign):
            if len(stmt.targets) != 1 or not isinstance(stmt.targets[0], ast.Name):
                raise _EvalError("unsupported-syntax", "only simple name assignment is supported")
            env[stmt.targets[0].id] = self._value(stmt.value, request, env)
            return
        if isinstance(stmt, ast.Expr):
            call = stmt.value
            if isinstance(call, ast.Call) and isinstance(call.func, ast.Name) and call.func.id == "print":
                args = [self._value(a, request, env) for a in call.args]
                lines.append(" ".join(str(a) for a in args))
                return
            value = self._value(stmt.value, request, env)
            if value is not None:
                lines.append(str(value))
            return
        raise _EvalError(
            "unsupported-syntax", f"statement {type(stmt).__name__} not supported by the stub"
        )

    def _value(self, node: ast.expr, request: ExecRequest, env: dict) -> Any:
        if isinstance(node, ast.Constant):
            return node.value
        if isinstance(node, ast.Name):
            if node.id in env:
                return env[node.id]
            raise _EvalError("name-resolution", f"name {node.id!r} is not defined")
        if isinstance(node, ast.JoinedStr):
            parts = []
            for piece in node.values:
                if isinstance(piece, ast.FormattedValue):
                    parts.append(str(self._value(piece.value, request, env)))
                else:
                    parts.append(str(self._value(piece, request, env)))
            return "".join(parts)
        if isinstance(node, (ast.List, ast.Tuple)):
            return [self._value(e, request, env) for e in node.elts]
        if isinstance(node, ast.Dict):
            return {
                self._value(k, request, env): self._value(v, request, env)
                for k, v in zip(node.keys, node.values)
            }
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            operand = self._value(node.operand, request, env)
            return -operand if isinstance(node.op, ast.USub) else +operand
        if isinstance(node, ast.BinOp):
            return self._binop(node, request, env)
        if isinstance(node, ast.Call):
            return self._call(node, request, env)
        raise _EvalError(
            "unsupported-syntax", f"expression {type(node).__name__} not supported by the stub"
        )

    def _binop(self, node: ast.BinOp, request: ExecRequest, env: dict) -> Any:
        left = self._value(node.left, request, env)
        right = self._value(node.right, request, env)
        ops = {
            ast.Add: lambda a, b: a + b,
            ast.Sub: lambda a, b: a - b,
            ast.Mult: lambda a, b: a * b,
            ast.Div: lambda a, b: a / b,
            ast.FloorDiv: lambda a, b: a // b,
            ast.Mod: lambda a, b: a % b,
            ast.Pow: lambda a, b: a**b,
        }
        fn = ops.get(type(node.op))
        if fn is None:
            raise _EvalError("unsupported-syntax", f"operator {type(node.op).__name__}")
        try:
            return fn(left, right)
        except Exception as exc:
            raise _EvalError("arithmetic-error", str(exc))

    def _call(self, node: ast.Call, request: ExecRequest, env: dict) -> Any:
        if not isinstance(node.func, ast.Name):
            raise _EvalError("unsupported-syntax", "only plain-name calls are supported")
        name = node.func.id
        args = [self._value(a, request, env) for a in node.args]
        kwargs = {
            kw.arg: self._value(kw.value, request, env)
            for kw in node.keywords
            if kw.arg is not None
        }
        if name == "print":
            raise _EvalError("unsupported-syntax", "print is a statement in the stub dialect")
        if name == "str":
            return str(args[0]) if args else ""
        if name == "final_answer":
            if not args and not kwargs:
                raise _EvalError("tool-argument", "final_answer needs an argument")
            return str(args[0] if args else next(iter(kwargs.values())))
        fixture = request.tool_fixtures.get(name)
        if fixture is None:
            raise _EvalError("name-resolution", f"name {name!r} is not defined")
        key = normalize_call_args(args, kwargs)
        if key in fixture:
            return fixture[key]
        if "*" in fixture:
            return fixture["*"]
        raise _EvalError(
            "fixture-miss", f"no canned response for {name}({key})"
        )


class SocketExecutorClient:
    """Client for the external sandbox service (one JSON line per request)."""

    def __init__(
        self,
        socket_path: str,
        hard_timeout_cap_s: float = DEFAULT_HARD_TIMEOUT_CAP_S,
        connect_timeout_s: float = 5.0,
    ) -> None:
        self.socket_path = socket_path
        self.hard_timeout_cap_s = hard_timeout_cap_s
        self.connect_timeout_s = connect_timeout_s

    def _roundtrip(self, payload: dict[str, Any], timeout_s: float) -> dict[str, Any]:
        try:
            with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as sock:
                sock.settimeout(self.connect_timeout_s)
                sock.connect(self.socket_path)
                sock.settimeout(timeout_s)
                sock.sendall(json.dumps(payload).encode("utf-8") + b"\n")
                chunks = []
                while True:
                    chunk = sock.recv(65536)
                    if not chunk:
                        break
                    chunks.append(chunk)
                    if chunk.endswith(b"\n"):
                        break
        except (OSError, ValueError) as exc:
            raise SandboxDown(f"sandbox service unreachable: {exc}") from exc
        raw = b"".join(chunks).strip()
        if not raw:
            raise SandboxDown("sandbox service closed the connection without replying")
        try:
            return json.loads(raw.decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise SandboxDown(f"sandbox service sent malformed JSON: {exc}") from exc

    def exec(self, request: ExecRequest) -> ExecResponse:
        if request.timeout_s > self.hard_timeout_cap_s:
            raise InvariantViolation(
                f"timeout_s {request.timeout_s} exceeds hard cap {self.hard_timeout_cap_s}"
            )
        payload = {
            "op": "exec",
            "request_id": request.request_id,
            "profile": request.profile,
            "prefix_codes": list(request.prefix_codes),
            "candidate_code": request.candidate_code,
            "tool_fixtures": request.tool_fixtures,
            "timeout_s": request.timeout_s,
            "workspace": request.workspace,
        }
        reply = self._roundtrip(payload, timeout_s=request.timeout_s + 15.0)
        return ExecResponse(
            request_id=reply.get("request_id", request.request_id),
            status=reply.get("status", "error"),
            output=reply.get("output", ""),
            error_kind=reply.get("error_kind"),
            error_message=reply.get("error_message"),
            duration_ms=int(reply.get("duration_ms", 0)),
        )

    def health(self) -> dict[str, Any]:
        return self._roundtrip({"op": "health"}, timeout_s=2.0)
