#!/usr/bin/env python3
"""Restricted execution driver, one process per request.

Reads a JSON request on stdin, runs the prefix codes and then the candidate
code in a locked-down namespace, and writes one JSON result line to file
descriptor 3, so nothing user code prints can be mistaken for the reply.
The parent enforces the wall-clock timeout by killing this process.

Restriction is best-effort interpreter hygiene, not a security boundary:
a builtins allowlist, a per-profile import allowlist (no socket, no
subprocess, no os), open() confined to the workspace, and an address-space
cap. Top-level expression statements echo their value like a REPL, which
keeps output identical to the in-process stub executor on the primary side.
"""

import ast
import builtins
import io
import json
import os
import resource
import sys
import time
from contextlib import redirect_stdout

MEMORY_CAP_BYTES = 512 * 1024 * 1024

_SHARED_IMPORTS = {
    "math", "json", "re", "datetime", "random", "itertools", "collections",
    "functools", "statistics", "string", "textwrap", "decimal", "fractions",
    "heapq", "bisect", "copy",
}
IMPORT_ALLOWLIST = {
    "agent": frozenset(_SHARED_IMPORTS),
    "filegen": frozenset(_SHARED_IMPORTS | {"csv", "io", "base64", "struct", "zlib", "wave"}),
}

_SAFE_BUILTIN_NAMES = (
    "abs", "all", "any", "ascii", "bin", "bool", "bytearray", "bytes",
    "callable", "chr", "complex", "dict", "dir", "divmod", "enumerate",
    "filter", "float", "format", "frozenset", "getattr", "hasattr", "hash",
    "hex", "id", "int", "isinstance", "issubclass", "iter", "len", "list",
    "map", "max", "min", "next", "object", "oct", "ord", "pow", "print",
    "range", "repr", "reversed", "round", "set", "setattr", "slice",
    "sorted", "str", "sum", "tuple", "type", "vars", "zip",
    "__build_class__", "property", "staticmethod", "classmethod", "super",
    "ArithmeticError", "AssertionError", "AttributeError", "BaseException",
    "Exception", "FloatingPointError", "IndexError", "KeyError",
    "LookupError", "NameError", "NotImplementedError", "OSError",
    "OverflowError", "RecursionError", "RuntimeError", "StopIteration",
    "TypeError", "ValueError", "ZeroDivisionError",
)


class SandboxViolation(Exception):
    pass


class ImportBlocked(Exception):
    pass


class ToolFixtureMiss(Exception):
    pass


class ToolArgumentError(Exception):
    pass


class EndpointBlocked(Exception):
    pass


def make_open(workspace):
    real_open = builtins.open
    root = os.path.realpath(workspace)

    def guarded_open(file, mode="r", *args, **kwargs):
        if isinstance(file, int):
            raise SandboxViolation("open() by file descriptor is not allowed")
        path = os.fspath(file)
        if isinstance(path, bytes):
            path = path.decode("utf-8", "replace")
        absolute = path if os.path.isabs(path) else os.path.join(root, path)
        target = os.path.realpath(absolute)
        if target != root and not target.startswith(root + os.sep):
            raise SandboxViolation(f"path {path!r} is outside the workspace")
        return real_open(target, mode, *args, **kwargs)

    return guarded_open


def make_import(allowed):
    real_import = builtins.__import__

    def guarded_import(name, globals=None, locals=None, fromlist=(), level=0):
        top = name.split(".")[0]
        if level != 0 or top not in allowed:
            raise ImportBlocked(f"import of {name!r} is not allowed in this profile")
        return real_import(name, globals, locals, fromlist, level)

    return guarded_import


def normalize_call_args(args, kwargs):
    # must stay byte-identical to the primary client's fixture keying
    parts = [repr(a) for a in args]
    parts.extend(f"{k}={kwargs[k]!r}" for k in sorted(kwargs))
    return ", ".join(parts)


def _passthrough(url, tool, key):
    import urllib.request

    body = json.dumps({"tool": tool, "args": key}).encode("utf-8")
    req = urllib.request.Request(url, data=body, headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req, timeout=10) as resp:
        return resp.read().decode("utf-8")


def bind_tool(name, table, allowed_endpoints):
    passthrough_url = table.get("endpoint") if set(table) == {"endpoint"} else None

    def tool(*args, **kwargs):
        key = normalize_call_args(args, kwargs)
        if passthrough_url is not None:
            if passthrough_url not in allowed_endpoints:
                raise EndpointBlocked(f"endpoint {passthrough_url!r} is not allow-listed")
            return _passthrough(passthrough_url, name, key)
        if key in table:
            return table[key]
        if "*" in table:
            return table["*"]
        raise ToolFixtureMiss(f"no canned response for {name}({key})")

    tool.__name__ = name
    return tool


def final_answer(*args, **kwargs):
    if not args and not kwargs:
        raise ToolArgumentError("final_answer needs an argument")
    return str(args[0] if args else next(iter(kwargs.values())))


_KINDS = (
    (SyntaxError, "syntax-error"),
    (SandboxViolation, "isolation"),
    (ImportBlocked, "import-blocked"),
    (ToolFixtureMiss, "fixture-miss"),
    (ToolArgumentError, "tool-argument"),
    (EndpointBlocked, "endpoint-blocked"),
    (NameError, "name-resolution"),
    (MemoryError, "memory-limit"),
    (ZeroDivisionError, "arithmetic-error"),
)


def classify(exc):
    for etype, kind in _KINDS:
        if isinstance(exc, etype):
            return kind
    return "raised-exception"


def run_code(code, env, stream, filename):
    tree = ast.parse(code, filename=filename)
    with redirect_stdout(stream):
        for node in tree.body:
            if isinstance(node, ast.Expr):
                value = eval(compile(ast.Expression(node.value), filename, "eval"), env)
                if value is not None:
                    print(value)
            else:
                module = ast.Module(body=[node], type_ignores=[])
                exec(compile(module, filename, "exec"), env)


def _elapsed_ms(started):
    return int((time.monotonic() - started) * 1000)


def execute(request):
    profile = request["profile"]
    if profile not in IMPORT_ALLOWLIST:
        return {
            "status": "error",
            "output": "",
            "error_kind": "invalid-request",
            "error_message": f"unknown profile {profile!r}",
            "duration_ms": 0,
        }
    workspace = request.get("workspace", ".")
    allowed_endpoints = set(request.get("allowed_endpoints") or ())

    safe = {name: getattr(builtins, name) for name in _SAFE_BUILTIN_NAMES}
    safe["open"] = make_open(workspace)
    safe["__import__"] = make_import(IMPORT_ALLOWLIST[profile])
    env = {"__builtins__": safe, "__name__": "__sandbox__"}
    for name, table in (request.get("tool_fixtures") or {}).items():
        env[name] = bind_tool(name, dict(table), allowed_endpoints)
    # the terminal echo is built in and wins over any fixture of the same name
    env["final_answer"] = final_answer

    started = time.monotonic()
    sink = io.StringIO()
    for pos, prefix in enumerate(request.get("prefix_codes") or (), start=1):
        try:
            run_code(prefix, env, sink, f"<prefix {pos}>")
        except BaseException as exc:
            return {
                "status": "error",
                "output": "",
                "error_kind": "prefix_failure",
                "error_message": f"prefix code {pos} failed ({classify(exc)}): {exc}",
                "duration_ms": _elapsed_ms(started),
            }
    captured = io.StringIO()
    try:
        run_code(request["candidate_code"], env, captured, "<candidate>")
    except BaseException as exc:
        return {
            "status": "error",
            "output": "",
            "error_kind": classify(exc),
            "error_message": f"{type(exc).__name__}: {exc}",
            "duration_ms": _elapsed_ms(started),
        }
    output = captured.getvalue()
    if output.endswith("\n"):
        output = output[:-1]
    return {
        "status": "ok",
        "output": output,
        "error_kind": None,
        "error_message": None,
        "duration_ms": _elapsed_ms(started),
    }


def main():
    reply = os.fdopen(3, "w", encoding="utf-8")
    request = json.loads(sys.stdin.read())
    try:
        resource.setrlimit(resource.RLIMIT_AS, (MEMORY_CAP_BYTES, MEMORY_CAP_BYTES))
    except (ValueError, OSError):
        pass  # the outer container may pin its own limits; proceed with those
    try:
        result = execute(request)
    except BaseException as exc:
        result = {
            "status": "error",
            "output": "",
            "error_kind": "driver-failure",
            "error_message": f"{type(exc).__name__}: {exc}",
            "duration_ms": 0,
        }
    result["request_id"] = request.get("request_id", "")
    reply.write(json.dumps(result))
    reply.write("\n")
    reply.flush()


if __name__ == "__main__":
    main()
